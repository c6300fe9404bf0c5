use guidegan_tensor::{Float, ParamStore};

use crate::error::Result;

/// Live discriminator parameters, their shadow copy and the mixing weight.
pub struct ShadowPair<'a, T: Float> {
    pub live: &'a mut ParamStore<T>,
    pub shadow: &'a mut ParamStore<T>,
    pub mix_lambda: f64,
}

impl<T: Float> ShadowPair<'_, T> {
    pub fn mix(&mut self) -> Result<()> {
        mix_parameters(self.live, self.shadow, self.mix_lambda)
    }
}

/// `live <- lambda * live + (1 - lambda) * shadow`, then `shadow <- live`.
pub fn mix_parameters<T: Float>(live: &mut ParamStore<T>, shadow: &mut ParamStore<T>, lambda: f64) -> Result<()> {
    live.check_compatible(shadow)?;
    let l = T::from_f64_lossy(lambda);
    let r = T::from_f64_lossy(1.0 - lambda);
    for (p, s) in live.iter_mut().zip(shadow.iter()) {
        for (a, &b) in p.value.data_mut().iter_mut().zip(s.value.data()) {
            *a = l * *a + r * b;
        }
    }
    shadow.copy_values_from(live)?;
    Ok(())
}

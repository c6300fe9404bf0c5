use guidegan_tensor::{Float, ParamStore, Tensor, TensorArchive};

use crate::config::Schedule;
use crate::error::{Error, Result};

/// Adam with bias correction. Frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam<T: Float> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        assert_eq!(store.len(), self.m.len(), "optimizer state does not match the store");
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(self.eps));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let grad = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grad();
    }

    pub fn save_into(&self, ar: &mut TensorArchive, prefix: &str, store: &ParamStore<T>) {
        for (i, p) in store.iter().enumerate() {
            ar.push(format!("{prefix}/m/{}", p.name), self.m[i].clone());
            ar.push(format!("{prefix}/v/{}", p.name), self.v[i].clone());
        }
        ar.metadata.insert(format!("{prefix}/t"), self.t.to_string());
    }

    pub fn load_from(&mut self, ar: &TensorArchive, prefix: &str, store: &ParamStore<T>) -> Result<()> {
        for (i, p) in store.iter().enumerate() {
            let m = ar.get::<T>(&format!("{prefix}/m/{}", p.name))?;
            let v = ar.get::<T>(&format!("{prefix}/v/{}", p.name))?;
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("optimizer moment shape mismatch for `{}`", p.name)));
            }
            self.m[i] = m.clone();
            self.v[i] = v.clone();
        }
        self.t = ar
            .metadata
            .get(&format!("{prefix}/t"))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing step count for `{prefix}`")))?;
        Ok(())
    }
}

/// Learning rate at `epoch`.
///
/// `Step`: `base * 0.1^floor(epoch / every)`.
/// `Linear`: `base` for `every` epochs, then linearly down to 0 over the next `every`.
pub fn lr_schedule(epoch: u64, base: f64, schedule: Schedule, every: u64) -> f64 {
    let every = every.max(1);
    match schedule {
        Schedule::Step => base * 0.1f64.powi((epoch / every) as i32),
        Schedule::Linear => {
            let past = epoch.saturating_sub(every) as f64;
            base * (1.0 - past / every as f64).max(0.0)
        }
    }
}

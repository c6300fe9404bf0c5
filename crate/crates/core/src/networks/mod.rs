//! Generators, patch discriminators with guidance heads, and the bundle that
//! owns both directions plus the shadow discriminator copies.

pub mod discriminator;
pub mod generator;
pub mod layers;

pub use discriminator::{build_discriminator, Discriminator, GuidanceHead};
pub use generator::{build_generator, Generator};

use guidegan_tensor::{Bound, Float, Graph, ParamStore, TensorArchive, Var};

use crate::config::TrainingConfig;
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::guidance::{DomainRole, GuidanceVector, Origin};

/// Guidance of `d` (the discriminator of `domain`) for image `x`.
pub fn extract_guidance<T: Float>(
    g: &mut Graph<T>,
    d: &Discriminator<T>,
    p: &Bound,
    x: Var,
    domain: Domain,
    role: DomainRole,
) -> guidegan_tensor::Result<GuidanceVector> {
    Ok(GuidanceVector {
        value: d.guidance(g, p, x)?,
        origin: Origin::Discriminator { domain, role },
    })
}

/// Two generators, two live discriminators and their shadow copies.
#[derive(Clone, Debug)]
pub struct GuidedCycleGan<T: Float> {
    pub gen_ab: Generator<T>,
    pub gen_ba: Generator<T>,
    pub d_a: Discriminator<T>,
    pub d_b: Discriminator<T>,
    pub shadow_a: Discriminator<T>,
    pub shadow_b: Discriminator<T>,
}

/// Archive prefixes, in a fixed order.
pub const COMPONENTS: [&str; 6] = ["gen_ab", "gen_ba", "d_a", "d_b", "shadow_a", "shadow_b"];

impl<T: Float> GuidedCycleGan<T> {
    pub fn new(cfg: &TrainingConfig) -> Result<Self> {
        let guided = cfg.guided();
        let d_a = build_discriminator(cfg, "d_a", guided)?;
        let d_b = build_discriminator(cfg, "d_b", guided)?;
        Ok(Self {
            gen_ab: build_generator(cfg, "gen_ab")?,
            gen_ba: build_generator(cfg, "gen_ba")?,
            shadow_a: d_a.clone(),
            shadow_b: d_b.clone(),
            d_a,
            d_b,
        })
    }

    pub fn generator(&self, from: Domain) -> &Generator<T> {
        match from {
            Domain::A => &self.gen_ab,
            Domain::B => &self.gen_ba,
        }
    }

    pub fn discriminator(&self, domain: Domain) -> &Discriminator<T> {
        match domain {
            Domain::A => &self.d_a,
            Domain::B => &self.d_b,
        }
    }

    pub fn shadow(&self, domain: Domain) -> &Discriminator<T> {
        match domain {
            Domain::A => &self.shadow_a,
            Domain::B => &self.shadow_b,
        }
    }

    pub fn stores(&self) -> [&ParamStore<T>; 6] {
        [
            &self.gen_ab.params,
            &self.gen_ba.params,
            &self.d_a.params,
            &self.d_b.params,
            &self.shadow_a.params,
            &self.shadow_b.params,
        ]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<T>; 6] {
        [
            &mut self.gen_ab.params,
            &mut self.gen_ba.params,
            &mut self.d_a.params,
            &mut self.d_b.params,
            &mut self.shadow_a.params,
            &mut self.shadow_b.params,
        ]
    }

    /// Every parameter as `component/name`.
    pub fn to_archive(&self) -> TensorArchive {
        let mut ar = TensorArchive::new();
        for (prefix, store) in COMPONENTS.iter().zip(self.stores()) {
            for p in store.iter() {
                ar.push(format!("{prefix}/{}", p.name), p.value.clone());
            }
        }
        ar
    }

    /// Load values saved by [`Self::to_archive`]. Names and shapes must agree exactly.
    pub fn load_archive(&mut self, ar: &TensorArchive) -> Result<()> {
        let expected: usize = self.stores().iter().map(|s| s.len()).sum();
        let found = ar.names().count();
        if expected != found {
            return Err(Error::Checkpoint(format!(
                "archive holds {found} tensors but the model has {expected} parameters"
            )));
        }
        for (prefix, store) in COMPONENTS.iter().zip(self.stores_mut()) {
            let values: Vec<_> = ar
                .with_prefix::<T>(&format!("{prefix}/"))?
                .into_iter()
                .collect();
            store.load_named(&values)?;
        }
        Ok(())
    }
}

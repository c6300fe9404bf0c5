use guidegan_tensor::{Bound, Float, Graph, ParamStore, Tensor, Var};

use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::networks::layers::{leaky, Conv, Init};

/// Patch discriminator with a guidance head on its penultimate feature map.
///
/// | layer    | op                                  | output (32 px, base `n`, 3 layers) |
/// |----------|-------------------------------------|------------------------------------|
/// | conv0    | conv 4x4 s2 p1, LeakyReLU(0.2)      | n x 16 x 16                        |
/// | conv1    | conv 4x4 s2 p1, IN, LeakyReLU(0.2)  | 2n x 8 x 8                         |
/// | conv2    | conv 4x4 s2 p1, IN, LeakyReLU(0.2)  | 4n x 4 x 4  (guidance tap)         |
/// | out      | conv 3x3 s1 p1                      | 1 x 4 x 4                          |
/// | head.proj| conv 1x1, LeakyReLU(0.2), global average pool | guidance_dim             |
///
/// With two layers the tap is `2n x 8 x 8` and the patch map `1 x 8 x 8`.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Float> {
    pub params: ParamStore<T>,
    pub head: Option<GuidanceHead>,
    /// Index of the trunk layer whose output feeds the head.
    pub guidance_tap: usize,
    pub guidance_dim: usize,
    trunk: Vec<Conv>,
    out: Conv,
}

/// `g = GAP(leaky(W_1x1 * features + b))`.
#[derive(Clone, Debug)]
pub struct GuidanceHead {
    pub proj: Conv,
}

/// Name prefix of the guidance head's parameters.
pub const HEAD_PREFIX: &str = "head.";

pub fn build_discriminator<T: Float>(cfg: &TrainingConfig, component: &str, with_head: bool) -> Result<Discriminator<T>> {
    let m = &cfg.model;
    if !(2..=3).contains(&m.disc_layers) {
        return Err(Error::Invalid(format!(
            "unsupported discriminator layer count {}; expected 2 or 3",
            m.disc_layers
        )));
    }
    let mut params = ParamStore::new();
    let mut init = Init {
        store: &mut params,
        seed: cfg.seed,
        std: m.init_std,
        component,
    };
    let mut trunk = Vec::new();
    let mut cin = 3;
    let mut cout = m.disc_channels;
    for i in 0..m.disc_layers {
        trunk.push(init.conv(&format!("conv{i}"), cin, cout, 4, 2, 1));
        cin = cout;
        cout *= 2;
    }
    let out = init.conv("out", cin, 1, 3, 1, 1);
    let head = with_head.then(|| GuidanceHead {
        proj: init.conv("head.proj", cin, m.guidance_dim, 1, 1, 0),
    });
    let mut d = Discriminator {
        params,
        head,
        guidance_tap: m.disc_layers - 1,
        guidance_dim: m.guidance_dim,
        trunk,
        out,
    };
    if with_head && cfg.guidance.frozen_zero {
        d.freeze_head_zero();
    }
    Ok(d)
}

impl GuidanceHead {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> guidegan_tensor::Result<Var> {
        let y = self.proj.forward(g, p, features)?;
        let y = leaky(g, y);
        g.global_avg_pool(y)
    }
}

impl<T: Float> Discriminator<T> {
    pub fn freeze_head_zero(&mut self) {
        for p in self.params.iter_mut() {
            if p.name.starts_with(HEAD_PREFIX) {
                p.value = Tensor::zeros(p.value.shape().to_vec());
                p.trainable = false;
            }
        }
    }

    /// The tapped (penultimate) feature map.
    pub fn features(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> guidegan_tensor::Result<Var> {
        let mut h = x;
        for (i, conv) in self.trunk.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            if i > 0 {
                h = g.instance_norm(h)?;
            }
            h = leaky(g, h);
        }
        Ok(h)
    }

    /// 1-channel patch map of unbounded scores.
    pub fn patch(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> guidegan_tensor::Result<Var> {
        let f = self.features(g, p, x)?;
        self.out.forward(g, p, f)
    }

    pub fn guidance_from_features(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> guidegan_tensor::Result<Var> {
        let head = self.head.as_ref().ok_or_else(|| guidegan_tensor::TensorError::InvalidArgument {
            op: "extract-guidance",
            msg: "discriminator has no guidance head".into(),
        })?;
        head.forward(g, p, features)
    }

    /// Guidance vector of length `guidance_dim` for image `x`.
    pub fn guidance(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> guidegan_tensor::Result<Var> {
        let f = self.features(g, p, x)?;
        self.guidance_from_features(g, p, f)
    }
}

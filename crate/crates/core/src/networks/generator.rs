use guidegan_tensor::{Bound, Float, Graph, ParamStore, Tensor, Var};

use crate::config::{AggregateKind, GuidanceSource, MergeKind, TrainingConfig};
use crate::error::{Error, Result};
use crate::guidance::{Adapters, Aggregator, Merge};
use crate::networks::layers::{Conv, Init, Up};

/// ResNet generator with a merge slot between encoder and decoder.
///
/// | stage    | layer                              | output (32 px, base `n`) |
/// |----------|------------------------------------|--------------------------|
/// | enc.conv0| conv 7x7 s1 p3, IN, ReLU           | n x 32 x 32              |
/// | enc.down1| conv 3x3 s2 p1, IN, ReLU           | 2n x 16 x 16             |
/// | enc.down2| conv 3x3 s2 p1, IN, ReLU           | 4n x 8 x 8               |
/// | res{i}   | (conv 3x3, IN, ReLU, conv 3x3, IN) + skip | 4n x 8 x 8        |
/// | merge    | concat(fused, z)                   | (f + 4n) x 8 x 8         |
/// | dec.up1  | convT 3x3 s2 p1 op1, IN, ReLU      | 2n x 16 x 16             |
/// | dec.up2  | convT 3x3 s2 p1 op1, IN, ReLU      | n x 32 x 32              |
/// | dec.out  | conv 7x7 s1 p3, tanh               | 3 x 32 x 32              |
///
/// `dec.up1` is stored as two weights: `dec.up1.weight` over the `z` channels
/// and `dec.up1.guidance_weight` over the fused channels. Their sum of
/// transposed convolutions equals one transposed convolution over the
/// concatenated latent.
#[derive(Clone, Debug)]
pub struct Generator<T: Float> {
    pub params: ParamStore<T>,
    pub merge: Option<Merge>,
    pub aggregator: Option<Aggregator>,
    pub adapters: Option<Adapters>,
    pub latent_channels: usize,
    pub guidance_dim: usize,
    enc0: Conv,
    down1: Conv,
    down2: Conv,
    res: Vec<(Conv, Conv)>,
    up1: Up,
    up1_guidance: Option<usize>,
    up2: Up,
    out: Conv,
}

/// Name prefixes of parameters that only exist to carry guidance.
pub const GUIDANCE_PREFIXES: &[&str] = &["merge.", "agg."];

pub fn build_generator<T: Float>(cfg: &TrainingConfig, component: &str) -> Result<Generator<T>> {
    let size = cfg.data.image_size;
    if size == 0 || !size.is_multiple_of(4) {
        return Err(Error::Invalid(format!("image size {size} is not divisible by 4")));
    }
    let m = &cfg.model;
    let n = m.gen_channels;
    let latent = m.latent_channels();
    let mut params = ParamStore::new();
    let mut init = Init {
        store: &mut params,
        seed: cfg.seed,
        std: m.init_std,
        component,
    };
    let enc0 = init.conv("enc.conv0", 3, n, 7, 1, 3);
    let down1 = init.conv("enc.down1", n, 2 * n, 3, 2, 1);
    let down2 = init.conv("enc.down2", 2 * n, latent, 3, 2, 1);
    let res = (0..m.residual_blocks)
        .map(|i| {
            (
                init.conv(&format!("res{i}.conv1"), latent, latent, 3, 1, 1),
                init.conv(&format!("res{i}.conv2"), latent, latent, 3, 1, 1),
            )
        })
        .collect();
    let up = |init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize| Up {
        weight: init.normal(&format!("{name}.weight"), &[cin, cout, 3, 3]),
        bias: init.zeros(&format!("{name}.bias"), &[cout]),
    };
    let up1 = up(&mut init, "dec.up1", latent, 2 * n);
    let up2 = up(&mut init, "dec.up2", 2 * n, n);
    let out = init.conv("dec.out", n, 3, 7, 1, 3);

    let d = m.guidance_dim;
    let merge = Merge::new(cfg.guidance.merge, &mut init, d, latent, m.fused());
    let up1_guidance = merge
        .as_ref()
        .map(|mg| init.normal("dec.up1.guidance_weight", &[mg.fused_channels(), 2 * n, 3, 3]));
    let count = match cfg.guidance.source {
        GuidanceSource::Multi => 2,
        _ => 1,
    };
    let (aggregator, adapters) = if cfg.guidance.merge == MergeKind::None {
        (None, None)
    } else {
        let adapters = cfg.guidance.adapters.then(|| Adapters::new(&mut init, count, d));
        let agg = match cfg.guidance.aggregate {
            AggregateKind::None => None,
            kind => Aggregator::new(kind, &mut init, count, d),
        };
        (agg, adapters)
    };

    let mut g = Generator {
        params,
        merge,
        aggregator,
        adapters,
        latent_channels: latent,
        guidance_dim: d,
        enc0,
        down1,
        down2,
        res,
        up1,
        up1_guidance,
        up2,
        out,
    };
    if cfg.guidance.frozen_zero {
        g.freeze_guidance_zero();
    }
    Ok(g)
}

fn norm_relu<T: Float>(g: &mut Graph<T>, x: Var) -> guidegan_tensor::Result<Var> {
    let x = g.instance_norm(x)?;
    Ok(g.relu(x))
}

impl<T: Float> Generator<T> {
    pub fn is_guided(&self) -> bool {
        self.merge.is_some()
    }

    /// Zero the merge and aggregation parameters and exclude them from training.
    pub fn freeze_guidance_zero(&mut self) {
        for p in self.params.iter_mut() {
            if GUIDANCE_PREFIXES.iter().any(|pre| p.name.starts_with(pre)) {
                p.value = Tensor::zeros(p.value.shape().to_vec());
                p.trainable = false;
            }
        }
    }

    /// `x (3, H, W)` to the latent `z (4n, H/4, W/4)`.
    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> guidegan_tensor::Result<Var> {
        let mut h = self.enc0.forward(g, p, x)?;
        h = norm_relu(g, h)?;
        h = self.down1.forward(g, p, h)?;
        h = norm_relu(g, h)?;
        h = self.down2.forward(g, p, h)?;
        h = norm_relu(g, h)?;
        for (c1, c2) in &self.res {
            let mut r = c1.forward(g, p, h)?;
            r = norm_relu(g, r)?;
            r = c2.forward(g, p, r)?;
            r = g.instance_norm(r)?;
            h = g.add(h, r)?;
        }
        Ok(h)
    }

    /// Decoder over `concat(fused, z)`; `fused = None` runs the unguided path.
    pub fn decode(&self, g: &mut Graph<T>, p: &Bound, z: Var, fused: Option<Var>) -> guidegan_tensor::Result<Var> {
        let mut h = self.up1.forward(g, p, z)?;
        if let (Some(f), Some(w)) = (fused, self.up1_guidance) {
            let extra = g.conv_transpose2d(f, p[w], None, 2, 1, 1)?;
            h = g.add(h, extra)?;
        }
        h = norm_relu(g, h)?;
        h = self.up2.forward(g, p, h)?;
        h = norm_relu(g, h)?;
        h = self.out.forward(g, p, h)?;
        Ok(g.tanh(h))
    }

    /// Reduce per-source guidance to the single vector the merge consumes.
    pub fn combine_guidance(&self, g: &mut Graph<T>, p: &Bound, sources: &[Var]) -> guidegan_tensor::Result<Var> {
        let adapted;
        let gs = match &self.adapters {
            Some(a) => {
                adapted = a.apply(g, p, sources)?;
                &adapted[..]
            }
            None => sources,
        };
        match (&self.aggregator, gs) {
            (Some(agg), _) => agg.forward(g, p, gs),
            (None, [one]) => Ok(*one),
            (None, _) => Err(guidegan_tensor::TensorError::InvalidArgument {
                op: "generator",
                msg: format!("{} guidance sources without an aggregator", gs.len()),
            }),
        }
    }

    /// `x -> G_dec(merge(G_enc(x), g))`. `sources` is ignored by unguided generators.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, sources: &[Var]) -> guidegan_tensor::Result<Var> {
        let z = self.encode(g, p, x)?;
        let fused = match &self.merge {
            Some(m) => {
                let gv = self.combine_guidance(g, p, sources)?;
                Some(m.fused(g, p, z, gv)?)
            }
            None => None,
        };
        self.decode(g, p, z, fused)
    }
}

//! Gradient checks of every loss composed with a small two-layer network.
//!
//! The 64-bit check is a plain central-difference comparison. The 32-bit
//! check compares the `f32` engine's analytic gradient against central
//! differences of the same function evaluated in `f64`, so that `f32`
//! rounding in the difference quotient does not mask backward errors.

use guidegan_tensor::{check_gradient, Bound, Float, Graph, Result, StoreId, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{GanMode, LossWeights};
use crate::guidance::guidance_regularization;
use crate::losses::{adversarial_loss_discriminator, adversarial_loss_generator, cycle_loss, total_generator_loss, LossParts};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Composition {
    LsganDiscriminator,
    LsganGenerator,
    LogDiscriminator,
    LogGenerator,
    Cycle,
    GuidanceRegularization,
    TotalGenerator,
}

impl Composition {
    pub const ALL: [Composition; 7] = [
        Composition::LsganDiscriminator,
        Composition::LsganGenerator,
        Composition::LogDiscriminator,
        Composition::LogGenerator,
        Composition::Cycle,
        Composition::GuidanceRegularization,
        Composition::TotalGenerator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Composition::LsganDiscriminator => "lsgan-discriminator",
            Composition::LsganGenerator => "lsgan-generator",
            Composition::LogDiscriminator => "log-discriminator",
            Composition::LogGenerator => "log-generator",
            Composition::Cycle => "cycle",
            Composition::GuidanceRegularization => "guidance-regularization",
            Composition::TotalGenerator => "total-generator",
        }
    }

    /// Random evaluation point: two `3x8x8` images, then the network weights.
    pub fn sample(self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let mut pts = vec![
            Tensor::uniform(vec![3, 8, 8], -1.0, 1.0, rng),
            Tensor::uniform(vec![3, 8, 8], -1.0, 1.0, rng),
        ];
        let shapes: Vec<Vec<usize>> = match self {
            // image -> patch
            Composition::LsganDiscriminator
            | Composition::LsganGenerator
            | Composition::LogDiscriminator
            | Composition::LogGenerator => vec![vec![4, 3, 4, 4], vec![4], vec![1, 4, 3, 3], vec![1]],
            // image -> image
            Composition::Cycle => vec![vec![4, 3, 3, 3], vec![4], vec![3, 4, 3, 3], vec![3]],
            // image -> vector
            Composition::GuidanceRegularization => vec![vec![4, 3, 4, 4], vec![4], vec![5, 4, 1, 1], vec![5]],
            Composition::TotalGenerator => vec![
                vec![4, 3, 3, 3],
                vec![4],
                vec![3, 4, 3, 3],
                vec![3],
                // discriminator and guidance head on the output
                vec![4, 3, 4, 4],
                vec![1, 4, 3, 3],
                vec![5, 4, 1, 1],
            ],
        };
        for s in shapes {
            pts.push(Tensor::randn(s, 0.5, rng));
        }
        pts
    }

    pub fn eval<T: Float>(self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let leaky = |g: &mut Graph<T>, x| g.leaky_relu(x, T::from_f64_lossy(0.2));
        let critic = |g: &mut Graph<T>, x, w1, b1, w2, b2: Option<Var>| -> Result<Var> {
            let h = g.conv2d(x, w1, b1, 2, 1)?;
            let h = leaky(g, h);
            g.conv2d(h, w2, b2, 1, 1)
        };
        let translator = |g: &mut Graph<T>, x, w1, b1, w2, b2| -> Result<Var> {
            let h = g.conv2d(x, w1, Some(b1), 1, 1)?;
            let h = leaky(g, h);
            let y = g.conv2d(h, w2, Some(b2), 1, 1)?;
            Ok(g.tanh(y))
        };
        let head = |g: &mut Graph<T>, x, w1, b1: Option<Var>, w2, b2: Option<Var>| -> Result<Var> {
            let h = g.conv2d(x, w1, b1, 2, 1)?;
            let h = leaky(g, h);
            let y = g.conv2d(h, w2, b2, 1, 0)?;
            let y = leaky(g, y);
            g.global_avg_pool(y)
        };
        let (xa, xb) = (v[0], v[1]);
        match self {
            Composition::LsganDiscriminator | Composition::LogDiscriminator => {
                let mode = if self == Composition::LsganDiscriminator { GanMode::Lsgan } else { GanMode::Log };
                let r = critic(g, xa, v[2], Some(v[3]), v[4], Some(v[5]))?;
                let f = critic(g, xb, v[2], Some(v[3]), v[4], Some(v[5]))?;
                adversarial_loss_discriminator(g, r, f, mode)
            }
            Composition::LsganGenerator | Composition::LogGenerator => {
                let mode = if self == Composition::LsganGenerator { GanMode::Lsgan } else { GanMode::Log };
                let f = critic(g, xa, v[2], Some(v[3]), v[4], Some(v[5]))?;
                adversarial_loss_generator(g, f, mode)
            }
            Composition::Cycle => {
                let ra = translator(g, xa, v[2], v[3], v[4], v[5])?;
                let rb = translator(g, xb, v[2], v[3], v[4], v[5])?;
                cycle_loss(g, xa, xb, ra, rb)
            }
            Composition::GuidanceRegularization => {
                let ga = head(g, xa, v[2], Some(v[3]), v[4], Some(v[5]))?;
                let gb = head(g, xb, v[2], Some(v[3]), v[4], Some(v[5]))?;
                guidance_regularization(g, ga, gb)
            }
            Composition::TotalGenerator => {
                let fake = translator(g, xa, v[2], v[3], v[4], v[5])?;
                let rec = translator(g, fake, v[2], v[3], v[4], v[5])?;
                let score = critic(g, fake, v[6], None, v[7], None)?;
                let gan = adversarial_loss_generator(g, score, GanMode::Lsgan)?;
                let cyc = cycle_loss(g, xa, xb, rec, xb)?;
                let g_real = head(g, xa, v[6], None, v[8], None)?;
                let g_fake = head(g, fake, v[6], None, v[8], None)?;
                let reg = guidance_regularization(g, g_real, g_fake)?;
                total_generator_loss(
                    g,
                    LossParts { gan, cyc, reg: Some(reg) },
                    LossWeights { lambda_gan: 1.0, lambda_cyc: 10.0, lambda_reg: 0.5 },
                )
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionCheck {
    pub name: String,
    pub dtype: String,
    pub trials: usize,
    pub max_rel_error: f64,
}

/// `f32` analytic gradient of `f32_fn` versus `f64` central differences of
/// `f64_fn`, both at `points`. Returns the max relative error.
pub fn check_gradient_f32<F32, F64>(f32_fn: F32, f64_fn: F64, points: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F32: Fn(&mut Graph<f32>, &[Var]) -> Result<Var>,
    F64: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<f32>::new();
    let vars: Vec<Var> = points.iter().map(|p| g.variable(p.cast())).collect();
    let out = f32_fn(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f64_fn(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let mut work = points.to_vec();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(points[i].shape().to_vec());
        let analytic = grads.wrt(*var).unwrap_or(&zeros);
        for j in 0..points[i].numel() {
            let orig = points[i].data()[j];
            work[i].data_mut()[j] = orig + epsilon;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - epsilon;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = f64::from(analytic.data()[j]);
            if !(a.is_finite() && numeric.is_finite()) {
                return Err(guidegan_tensor::TensorError::NonFinite {
                    op: format!("gradient check at input {i}, coordinate {j}"),
                });
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Run every composition `trials` times in both precisions.
pub fn check_compositions(trials: usize, seed: u64) -> Result<Vec<CompositionCheck>> {
    let mut out = Vec::new();
    for (k, comp) in Composition::ALL.iter().copied().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32));
        let (mut e64, mut e32): (f64, f64) = (0.0, 0.0);
        for _ in 0..trials {
            let pts = comp.sample(&mut rng);
            let r = check_gradient(|g: &mut Graph<f64>, v: &[Var]| comp.eval(g, v), &pts, 1e-6)?;
            e64 = e64.max(r.max_rel_error);
            let r32 = check_gradient_f32(
                |g: &mut Graph<f32>, v: &[Var]| comp.eval(g, v),
                |g: &mut Graph<f64>, v: &[Var]| comp.eval(g, v),
                &pts,
                1e-6,
            )?;
            e32 = e32.max(r32);
        }
        for (dtype, e) in [("f64", e64), ("f32", e32)] {
            out.push(CompositionCheck {
                name: comp.name().to_string(),
                dtype: dtype.to_string(),
                trials,
                max_rel_error: e,
            });
        }
    }
    Ok(out)
}

/// Bind arbitrary nodes as a store's parameters (for gradient checks over weights).
pub fn bound_from(store: StoreId, vars: &[Var]) -> Bound {
    Bound::from_vars(store, vars.to_vec())
}

//! Adversarial, cycle-consistency and combined generator objectives.
//!
//! Expectations are plain means over patch positions (batch size is 1).
//! Least-squares terms carry no 1/2 factor.

use guidegan_tensor::{Float, Graph, Result, TensorError, Var};

use crate::config::{GanMode, LossWeights};

fn finite<T: Float>(g: &Graph<T>, op: &'static str, vs: &[Var]) -> Result<()> {
    if vs.iter().all(|&v| g.value(v).is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op: op.into() })
    }
}

/// `E[-log sigmoid(x)]` written as `E[-log(sigmoid(x))]` on the graph.
fn neg_log_sigmoid_mean<T: Float>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.sigmoid(x);
    let l = g.log(s);
    let m = g.mean(l);
    g.scale(m, -T::one())
}

/// Discriminator objective, minimized.
/// lsgan: `E[(d_real - 1)^2] + E[d_fake^2]`;
/// log: `E[-log sigmoid(d_real)] + E[-log(1 - sigmoid(d_fake))]`.
pub fn adversarial_loss_discriminator<T: Float>(g: &mut Graph<T>, d_real: Var, d_fake: Var, mode: GanMode) -> Result<Var> {
    finite(g, "adversarial-loss-discriminator", &[d_real, d_fake])?;
    match mode {
        GanMode::Lsgan => {
            let r = g.add_scalar(d_real, -T::one());
            let r = g.square(r);
            let r = g.mean(r);
            let f = g.square(d_fake);
            let f = g.mean(f);
            g.add(r, f)
        }
        GanMode::Log => {
            let r = neg_log_sigmoid_mean(g, d_real);
            // 1 - sigmoid(x) = sigmoid(-x)
            let neg = g.scale(d_fake, -T::one());
            let f = neg_log_sigmoid_mean(g, neg);
            g.add(r, f)
        }
    }
}

/// Generator objective on the discriminator's view of a fake.
/// lsgan: `E[(d_fake - 1)^2]`; log: `E[-log sigmoid(d_fake)]`.
pub fn adversarial_loss_generator<T: Float>(g: &mut Graph<T>, d_fake: Var, mode: GanMode) -> Result<Var> {
    finite(g, "adversarial-loss-generator", &[d_fake])?;
    Ok(match mode {
        GanMode::Lsgan => {
            let r = g.add_scalar(d_fake, -T::one());
            let r = g.square(r);
            g.mean(r)
        }
        GanMode::Log => neg_log_sigmoid_mean(g, d_fake),
    })
}

/// `mean|x - recon|`.
pub fn l1<T: Float>(g: &mut Graph<T>, x: Var, recon: Var) -> Result<Var> {
    let d = g.sub(x, recon)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `mean|x_a - recon_a| + mean|x_b - recon_b|`.
pub fn cycle_loss<T: Float>(g: &mut Graph<T>, x_a: Var, x_b: Var, recon_a: Var, recon_b: Var) -> Result<Var> {
    let a = l1(g, x_a, recon_a)?;
    let b = l1(g, x_b, recon_b)?;
    g.add(a, b)
}

/// Scalar loss parts of one generator step.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub gan: Var,
    pub cyc: Var,
    pub reg: Option<Var>,
}

/// `lambda_gan * L_gan + lambda_cyc * L_cyc + lambda_reg * L_reg`.
pub fn total_generator_loss<T: Float>(g: &mut Graph<T>, parts: LossParts, w: LossWeights) -> Result<Var> {
    let gan = g.scale(parts.gan, T::from_f64_lossy(w.lambda_gan));
    let cyc = g.scale(parts.cyc, T::from_f64_lossy(w.lambda_cyc));
    let mut total = g.add(gan, cyc)?;
    if let Some(reg) = parts.reg {
        let reg = g.scale(reg, T::from_f64_lossy(w.lambda_reg));
        total = g.add(total, reg)?;
    }
    Ok(total)
}

//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result, TensorError};
use crate::{Float, Graph, OpAttrs, OpKind, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` attaining the maximum.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compare the analytic gradient of scalar `f` at `points` against central
/// differences with step `epsilon` in `(0, 1e-2]`.
pub fn check_gradient<T, F>(f: F, points: &[Tensor<T>], epsilon: f64) -> Result<GradCheckReport>
where
    T: Float,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(invalid("check_gradient", format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let mut g = Graph::new();
    g.set_finite_checks(true);
    let vars: Vec<Var> = points.iter().map(|p| g.variable(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |pts: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        g.set_finite_checks(true);
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.check_finite()?;
        let v = g.scalar(out).as_f64();
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                op: "check_gradient: perturbed evaluation".into(),
            });
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work: Vec<Tensor<T>> = points.to_vec();
    let step = T::from_f64_lossy(epsilon);
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(points[i].shape().to_vec());
        let analytic = grads.wrt(*var).unwrap_or(&zeros);
        for j in 0..points[i].numel() {
            let orig = points[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            // Divide by the step actually taken after rounding to T.
            let h = (orig + step).as_f64() - (orig - step).as_f64();
            let numeric = (plus - minus) / h;
            let a = analytic.data()[j].as_f64();
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Err(TensorError::NonFinite {
                    op: format!("check_gradient: input {i} coordinate {j}"),
                });
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Per-op outcome of [`check_catalog`].
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub kind: OpKind,
    pub trials: usize,
    pub max_rel_error: f64,
}

/// Gradient-check every catalog op at `trials` random points.
///
/// Each trial reads the op output out through a random linear functional so
/// that no gradient is trivially constant. Inputs to non-smooth ops are kept
/// at least `0.1` away from their kinks.
pub fn check_catalog<T: Float>(trials: usize, epsilon: f64, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let case = CatalogCase::<T>::random(kind, &mut rng);
            let report = check_gradient(|g, vars| case.eval(g, vars), &case.inputs, epsilon)?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(OpCheck {
            kind,
            trials,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

struct CatalogCase<T> {
    kind: OpKind,
    inputs: Vec<Tensor<T>>,
    attrs: OpAttrs,
    readout: Tensor<T>,
}

fn away_from_zero<T: Float, R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let mag: f64 = rng.random_range(0.1..1.5);
        let v = if rng.random_bool(0.5) { mag } else { -mag };
        T::from_f64_lossy(v)
    })
}

impl<T: Float> CatalogCase<T> {
    fn random<R: Rng>(kind: OpKind, rng: &mut R) -> Self {
        let mut attrs = OpAttrs::default();
        let u = |shape: Vec<usize>, rng: &mut R| Tensor::<T>::uniform(shape, -1.0, 1.0, rng);
        let inputs = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => vec![u(vec![3, 4], rng), u(vec![3, 4], rng)],
            OpKind::Scale | OpKind::AddScalar => {
                attrs.scalar = rng.random_range(-2.0..2.0);
                vec![u(vec![2, 3, 2], rng)]
            }
            OpKind::MatMul => vec![u(vec![3, 4], rng), u(vec![4, 2], rng)],
            OpKind::Transpose => vec![u(vec![3, 5], rng)],
            OpKind::Conv2d => {
                attrs.stride = rng.random_range(1..=2);
                attrs.pad = rng.random_range(0..=1);
                vec![u(vec![2, 5, 5], rng), u(vec![3, 2, 3, 3], rng), u(vec![3], rng)]
            }
            OpKind::ConvTranspose2d => {
                attrs.stride = 2;
                attrs.pad = 1;
                attrs.output_padding = rng.random_range(0..=1);
                vec![u(vec![2, 3, 3], rng), u(vec![2, 3, 3, 3], rng), u(vec![3], rng)]
            }
            OpKind::InstanceNorm => vec![u(vec![2, 3, 3], rng)],
            OpKind::Relu | OpKind::Abs => vec![away_from_zero(vec![3, 4], rng)],
            OpKind::LeakyRelu => {
                attrs.scalar = 0.2;
                vec![away_from_zero(vec![3, 4], rng)]
            }
            OpKind::Tanh | OpKind::Sigmoid | OpKind::Square => vec![u(vec![3, 4], rng).map(|v| v + v)],
            OpKind::Softmax => {
                attrs.axis = rng.random_range(0..2);
                vec![u(vec![3, 4], rng).map(|v| v + v)]
            }
            OpKind::GlobalAvgPool => vec![u(vec![3, 2, 3], rng)],
            OpKind::BroadcastSpatial => {
                attrs.shape = vec![2, 3];
                vec![u(vec![4], rng)]
            }
            OpKind::Reshape => {
                attrs.shape = vec![4, 3];
                vec![u(vec![2, 6], rng)]
            }
            OpKind::Concat => vec![u(vec![2, 3], rng), u(vec![1, 3], rng), u(vec![3, 3], rng)],
            OpKind::Narrow => {
                attrs.start = 1;
                attrs.len = 2;
                vec![u(vec![4, 3], rng)]
            }
            OpKind::Mean | OpKind::Sum => vec![u(vec![3, 4], rng)],
            OpKind::Log => vec![Tensor::uniform(vec![3, 4], 0.5, 2.0, rng)],
        };
        let mut probe = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
        let y = probe.apply(kind, &vars, &attrs).expect("catalog case is well formed");
        let readout = Tensor::uniform(probe.shape(y).to_vec(), -1.0, 1.0, rng);
        Self {
            kind,
            inputs,
            attrs,
            readout,
        }
    }

    fn eval(&self, g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
        let y = g.apply(self.kind, vars, &self.attrs)?;
        let r = g.constant(self.readout.clone());
        let prod = g.mul(y, r)?;
        Ok(g.sum(prod))
    }
}

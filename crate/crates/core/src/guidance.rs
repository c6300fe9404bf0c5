//! Guidance merge strategies, multi-discriminator aggregation and the
//! guidance regularizer.
//!
//! Merge and aggregator parameters live in the owning generator's store;
//! the structs here only hold indices into it.

use guidegan_tensor::{Bound, Float, Graph, Result, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::config::{AggregateKind, GuidanceSource, MergeKind};
use crate::data::Domain;
use crate::networks::layers::{column, flat, Conv, Init, Linear};

/// Position of a discriminator relative to a generator's translation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainRole {
    Input,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Discriminator { domain: Domain, role: DomainRole },
    Aggregated,
}

/// A guidance message: a rank-1 graph node of length `guidance_dim`.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceVector {
    pub value: Var,
    pub origin: Origin,
}

/// Discriminators feeding the generator translating `from -> to`, in
/// (input-domain, output-domain) order.
pub fn sources(source: GuidanceSource, from: Domain) -> Vec<(Domain, DomainRole)> {
    let to = from.other();
    match source {
        GuidanceSource::InputDomain => vec![(from, DomainRole::Input)],
        GuidanceSource::OutputDomain => vec![(to, DomainRole::Output)],
        GuidanceSource::Multi => vec![(from, DomainRole::Input), (to, DomainRole::Output)],
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, msg: msg.into() }
}

fn check_vectors<T: Float>(g: &Graph<T>, op: &'static str, gs: &[Var]) -> Result<usize> {
    let first = *gs.first().ok_or_else(|| invalid(op, "empty guidance list"))?;
    let d = g.value(first).numel();
    for &v in gs {
        if g.shape(v) != [d] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: vec![d],
                rhs: g.shape(v).to_vec(),
            });
        }
    }
    Ok(d)
}

fn check_latent<T: Float>(g: &Graph<T>, op: &'static str, z: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(z) {
        [c, h, w] if c > 0 && h * w > 0 => Ok((c, h, w)),
        _ => Err(invalid(op, format!("expected a non-empty (C, h, w) latent, got {:?}", g.shape(z)))),
    }
}

// ---- merges -----------------------------------------------------------------

/// `z_new = concat(NN_g(broadcast(g), z), z)` with NN_g a 3x3 convolution.
#[derive(Clone, Debug)]
pub struct ConcatMerge {
    pub nn_g: Conv,
    pub guidance_dim: usize,
    pub latent: usize,
    pub fused: usize,
}

impl ConcatMerge {
    pub fn new<T: Float>(init: &mut Init<'_, T>, guidance_dim: usize, latent: usize, fused: usize) -> Self {
        Self {
            nn_g: init.conv("merge.nn_g", guidance_dim + latent, fused, 3, 1, 1),
            guidance_dim,
            latent,
            fused,
        }
    }

    /// The guidance-dependent half only.
    pub fn fused<T: Float>(&self, g: &mut Graph<T>, p: &Bound, z: Var, gv: Var) -> Result<Var> {
        let (c, h, w) = check_latent(g, "merge-concat", z)?;
        let d = check_vectors(g, "merge-concat", &[gv])?;
        if c != self.latent || d != self.guidance_dim {
            return Err(TensorError::ShapeMismatch {
                op: "merge-concat",
                lhs: vec![self.guidance_dim, self.latent],
                rhs: vec![d, c],
            });
        }
        let gb = g.broadcast_spatial(gv, h, w)?;
        let joint = g.concat(&[gb, z])?;
        self.nn_g.forward(g, p, joint)
    }
}

/// Single-query attention over the `h*w` latent slots.
#[derive(Clone, Debug)]
pub struct AttentionMerge {
    /// `(d, C)` key projection.
    pub w_k: usize,
    /// `(d, d)` query projection.
    pub w_q: usize,
    /// `(fused, C)` value projection.
    pub w_v: usize,
    pub guidance_dim: usize,
    pub latent: usize,
    pub fused: usize,
}

/// `softmax(K^T q)` over slots and the weighted value sum.
/// `keys (dk, S)`, `query (dk, 1)`, `values (Cv, S)`; returns `(weights (S, 1), out (Cv, 1))`.
pub fn attention<T: Float>(g: &mut Graph<T>, keys: Var, query: Var, values: Var) -> Result<(Var, Var)> {
    let kt = g.transpose(keys)?;
    let logits = g.matmul(kt, query)?;
    let weights = g.softmax(logits, 0)?;
    let out = g.matmul(values, weights)?;
    Ok((weights, out))
}

impl AttentionMerge {
    pub fn new<T: Float>(init: &mut Init<'_, T>, guidance_dim: usize, latent: usize, fused: usize) -> Self {
        Self {
            w_k: init.normal("merge.w_k", &[guidance_dim, latent]),
            w_q: init.normal("merge.w_q", &[guidance_dim, guidance_dim]),
            w_v: init.normal("merge.w_v", &[fused, latent]),
            guidance_dim,
            latent,
            fused,
        }
    }

    /// Attention weights over slots `(S, 1)` and the fused block `(fused, h, w)`.
    pub fn attend<T: Float>(&self, g: &mut Graph<T>, p: &Bound, z: Var, gv: Var) -> Result<(Var, Var)> {
        let (c, h, w) = check_latent(g, "merge-attention", z)?;
        let d = check_vectors(g, "merge-attention", &[gv])?;
        if c != self.latent || d != self.guidance_dim {
            return Err(TensorError::ShapeMismatch {
                op: "merge-attention",
                lhs: vec![self.guidance_dim, self.latent],
                rhs: vec![d, c],
            });
        }
        let slots = g.reshape(z, &[c, h * w])?;
        let keys = g.matmul(p[self.w_k], slots)?;
        let values = g.matmul(p[self.w_v], slots)?;
        let gcol = column(g, gv)?;
        let query = g.matmul(p[self.w_q], gcol)?;
        let (weights, a) = attention(g, keys, query, values)?;
        let a = flat(g, a)?;
        let fused = g.broadcast_spatial(a, h, w)?;
        Ok((weights, fused))
    }

    pub fn fused<T: Float>(&self, g: &mut Graph<T>, p: &Bound, z: Var, gv: Var) -> Result<Var> {
        Ok(self.attend(g, p, z, gv)?.1)
    }
}

#[derive(Clone, Debug)]
pub enum Merge {
    Concat(ConcatMerge),
    Attention(AttentionMerge),
}

impl Merge {
    pub fn new<T: Float>(
        kind: MergeKind,
        init: &mut Init<'_, T>,
        guidance_dim: usize,
        latent: usize,
        fused: usize,
    ) -> Option<Self> {
        match kind {
            MergeKind::None => None,
            MergeKind::Concat => Some(Merge::Concat(ConcatMerge::new(init, guidance_dim, latent, fused))),
            MergeKind::Attention => Some(Merge::Attention(AttentionMerge::new(init, guidance_dim, latent, fused))),
        }
    }

    pub fn fused_channels(&self) -> usize {
        match self {
            Merge::Concat(m) => m.fused,
            Merge::Attention(m) => m.fused,
        }
    }

    /// Guidance half of the merged latent, `(fused, h, w)`.
    pub fn fused<T: Float>(&self, g: &mut Graph<T>, p: &Bound, z: Var, gv: Var) -> Result<Var> {
        match self {
            Merge::Concat(m) => m.fused(g, p, z, gv),
            Merge::Attention(m) => m.fused(g, p, z, gv),
        }
    }

    /// `concat(fused, z)`, channel count `fused + C`.
    pub fn merge<T: Float>(&self, g: &mut Graph<T>, p: &Bound, z: Var, gv: Var) -> Result<Var> {
        let f = self.fused(g, p, z, gv)?;
        g.concat(&[f, z])
    }
}

// ---- aggregation ------------------------------------------------------------

/// `sum_i w_i g_i` with `weights` a `(C, 1)` node.
pub fn combine<T: Float>(g: &mut Graph<T>, gs: &[Var], weights: Var) -> Result<Var> {
    let d = check_vectors(g, "aggregate", gs)?;
    if g.shape(weights) != [gs.len(), 1] {
        return Err(TensorError::ShapeMismatch {
            op: "aggregate",
            lhs: vec![gs.len(), 1],
            rhs: g.shape(weights).to_vec(),
        });
    }
    let rows = gs
        .iter()
        .map(|&v| g.reshape(v, &[1, d]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat(&rows)?;
    let st = g.transpose(stacked)?;
    let out = g.matmul(st, weights)?;
    flat(g, out)
}

/// Elementwise mean, computed as the uniform-weight combination.
pub fn aggregate_average<T: Float>(g: &mut Graph<T>, gs: &[Var]) -> Result<Var> {
    check_vectors(g, "aggregate-average", gs)?;
    let n = gs.len();
    let w = g.constant(Tensor::full(vec![n, 1], T::one() / T::from_usize(n).unwrap()));
    combine(g, gs, w)
}

/// Softmax-normalized learned weights over the stacked guidance vectors.
#[derive(Clone, Debug)]
pub struct WeightedAggregator {
    pub logits: Linear,
    pub count: usize,
    pub guidance_dim: usize,
}

impl WeightedAggregator {
    pub fn new<T: Float>(init: &mut Init<'_, T>, count: usize, guidance_dim: usize) -> Self {
        Self {
            logits: init.linear("agg.weight_net", count * guidance_dim, count, true),
            count,
            guidance_dim,
        }
    }

    pub fn weights<T: Float>(&self, g: &mut Graph<T>, p: &Bound, gs: &[Var]) -> Result<Var> {
        let d = check_vectors(g, "aggregate-weighted", gs)?;
        if gs.len() != self.count || d != self.guidance_dim {
            return Err(TensorError::ShapeMismatch {
                op: "aggregate-weighted",
                lhs: vec![self.count, self.guidance_dim],
                rhs: vec![gs.len(), d],
            });
        }
        let stacked = g.concat(gs)?;
        let x = column(g, stacked)?;
        let logits = self.logits.forward(g, p, x)?;
        g.softmax(logits, 0)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, gs: &[Var]) -> Result<Var> {
        let w = self.weights(g, p, gs)?;
        combine(g, gs, w)
    }
}

/// One GRU cell, gates in (reset, update, candidate) order:
///
/// ```text
/// r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// u  = sigmoid(W_iu x + b_iu + W_hu h + b_hu)
/// n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
/// h' = (1 - u) * n + u * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_i: [usize; 3],
    pub w_h: [usize; 3],
    pub b_i: [usize; 3],
    pub b_h: [usize; 3],
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, input: usize, hidden: usize) -> Self {
        let gate = |init: &mut Init<'_, T>, kind: &str, gate: &str, shape: &[usize], zero: bool| {
            let n = format!("{name}.{kind}_{gate}");
            if zero {
                init.zeros(&n, shape)
            } else {
                init.normal(&n, shape)
            }
        };
        let mut w_i = [0; 3];
        let mut w_h = [0; 3];
        let mut b_i = [0; 3];
        let mut b_h = [0; 3];
        for (k, gname) in ["r", "z", "n"].iter().enumerate() {
            w_i[k] = gate(init, "w_i", gname, &[hidden, input], false);
            w_h[k] = gate(init, "w_h", gname, &[hidden, hidden], false);
            b_i[k] = gate(init, "b_i", gname, &[hidden, 1], true);
            b_h[k] = gate(init, "b_h", gname, &[hidden, 1], true);
        }
        Self { w_i, w_h, b_i, b_h, hidden }
    }

    /// One update on column vectors `x (input, 1)`, `h (hidden, 1)`.
    pub fn step<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let pre = |g: &mut Graph<T>, k: usize| -> Result<(Var, Var)> {
            let xi = g.matmul(p[self.w_i[k]], x)?;
            let xi = g.add(xi, p[self.b_i[k]])?;
            let hh = g.matmul(p[self.w_h[k]], h)?;
            let hh = g.add(hh, p[self.b_h[k]])?;
            Ok((xi, hh))
        };
        let (xr, hr) = pre(g, 0)?;
        let (xu, hu) = pre(g, 1)?;
        let (xn, hn) = pre(g, 2)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let u = g.add(xu, hu)?;
        let u = g.sigmoid(u);
        let rh = g.mul(r, hn)?;
        let n = g.add(xn, rh)?;
        let n = g.tanh(n);
        let neg = g.scale(u, -T::one());
        let keep = g.add_scalar(neg, T::one());
        let a = g.mul(keep, n)?;
        let b = g.mul(u, h)?;
        g.add(a, b)
    }

    /// Final hidden state after running over `xs` in order from `h = 0`.
    pub fn run<T: Float>(&self, g: &mut Graph<T>, p: &Bound, xs: &[Var]) -> Result<Var> {
        let mut h = g.constant(Tensor::zeros(vec![self.hidden, 1]));
        for &x in xs {
            h = self.step(g, p, x, h)?;
        }
        Ok(h)
    }
}

/// Bidirectional GRU over the ordered guidance list; the two final states are
/// summed and projected back to `guidance_dim`.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
    pub proj: Linear,
    pub guidance_dim: usize,
}

impl BiGru {
    pub fn new<T: Float>(init: &mut Init<'_, T>, guidance_dim: usize, hidden: usize) -> Self {
        Self {
            forward: GruCell::new(init, "agg.gru_fwd", guidance_dim, hidden),
            backward: GruCell::new(init, "agg.gru_bwd", guidance_dim, hidden),
            proj: init.linear("agg.proj", hidden, guidance_dim, true),
            guidance_dim,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, gs: &[Var]) -> Result<Var> {
        let d = check_vectors(g, "aggregate-bigru", gs)?;
        if d != self.guidance_dim {
            return Err(TensorError::ShapeMismatch {
                op: "aggregate-bigru",
                lhs: vec![self.guidance_dim],
                rhs: vec![d],
            });
        }
        let cols = gs.iter().map(|&v| column(g, v)).collect::<Result<Vec<_>>>()?;
        let hf = self.forward.run(g, p, &cols)?;
        let rev: Vec<Var> = cols.iter().rev().copied().collect();
        let hb = self.backward.run(g, p, &rev)?;
        let h = g.add(hf, hb)?;
        let out = self.proj.forward(g, p, h)?;
        flat(g, out)
    }
}

#[derive(Clone, Debug)]
pub enum Aggregator {
    Average,
    Weighted(WeightedAggregator),
    Bigru(BiGru),
}

impl Aggregator {
    pub fn new<T: Float>(kind: AggregateKind, init: &mut Init<'_, T>, count: usize, guidance_dim: usize) -> Option<Self> {
        match kind {
            AggregateKind::None => None,
            AggregateKind::Average => Some(Aggregator::Average),
            AggregateKind::Weighted => Some(Aggregator::Weighted(WeightedAggregator::new(init, count, guidance_dim))),
            AggregateKind::Bigru => Some(Aggregator::Bigru(BiGru::new(init, guidance_dim, guidance_dim))),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, gs: &[Var]) -> Result<Var> {
        match self {
            Aggregator::Average => aggregate_average(g, gs),
            Aggregator::Weighted(a) => a.forward(g, p, gs),
            Aggregator::Bigru(a) => a.forward(g, p, gs),
        }
    }
}

/// Per-source linear maps into a shared guidance space, identity at init.
#[derive(Clone, Debug)]
pub struct Adapters {
    pub maps: Vec<usize>,
}

impl Adapters {
    pub fn new<T: Float>(init: &mut Init<'_, T>, count: usize, guidance_dim: usize) -> Self {
        Self {
            maps: (0..count)
                .map(|i| init.identity(&format!("agg.adapter{i}.weight"), guidance_dim))
                .collect(),
        }
    }

    pub fn apply<T: Float>(&self, g: &mut Graph<T>, p: &Bound, gs: &[Var]) -> Result<Vec<Var>> {
        if gs.len() != self.maps.len() {
            return Err(invalid("adapters", format!("expected {} sources, got {}", self.maps.len(), gs.len())));
        }
        gs.iter()
            .zip(&self.maps)
            .map(|(&v, &m)| {
                let c = column(g, v)?;
                let y = g.matmul(p[m], c)?;
                flat(g, y)
            })
            .collect()
    }
}

// ---- regularization ---------------------------------------------------------

/// `mean |g_real - g_fake|`.
pub fn guidance_regularization<T: Float>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    check_vectors(g, "guidance-regularization", &[real, fake])?;
    let d = g.sub(real, fake)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so node ids are already a
//! topological order and backward is a single reverse sweep.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, shape_mismatch, Result, TensorError};
use crate::kernels::{col2im, gemm, im2col, reduce_sum, ConvGeometry, MatRef};
use crate::param::{ParamStore, StoreId};
use crate::{fault, Float, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamKey {
    pub store: StoreId,
    pub index: usize,
}

/// How a [`ParamStore`] is attached to a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    /// Trainable parameters receive gradients; frozen ones are constants.
    Train,
    /// Every parameter is a constant.
    Constant,
}

/// Graph leaves for every parameter of one store, in registration order.
#[derive(Clone, Debug)]
pub struct Bound {
    store: StoreId,
    vars: Vec<Var>,
}

impl Bound {
    /// Treat arbitrary nodes as a store's parameters, in registration order.
    /// Lets a gradient check drive a network's weights as free inputs.
    pub fn from_vars(store: StoreId, vars: Vec<Var>) -> Self {
        Self { store, vars }
    }

    pub fn store(&self) -> StoreId {
        self.store
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<usize> for Bound {
    type Output = Var;

    fn index(&self, idx: usize) -> &Var {
        &self.vars[idx]
    }
}

/// Every kind in the op catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MatMul,
    Transpose,
    Conv2d,
    ConvTranspose2d,
    InstanceNorm,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Softmax,
    GlobalAvgPool,
    BroadcastSpatial,
    Reshape,
    Concat,
    Narrow,
    Mean,
    Sum,
    Abs,
    Square,
    Log,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::InstanceNorm,
        OpKind::Relu,
        OpKind::LeakyRelu,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::GlobalAvgPool,
        OpKind::BroadcastSpatial,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Abs,
        OpKind::Square,
        OpKind::Log,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add-scalar",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv-transpose2d",
            OpKind::InstanceNorm => "instance-norm",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky-relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::GlobalAvgPool => "global-average-pool",
            OpKind::BroadcastSpatial => "broadcast-spatial",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Log => "log",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| TensorError::UnknownOp(s.to_string()))
    }
}

/// Non-tensor arguments for [`Graph::apply`].
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub scalar: f64,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
    pub axis: usize,
    pub start: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        /// Convolution geometry mapping the output back onto the input.
        geom: ConvGeometry,
    },
    InstanceNorm {
        input: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    GlobalAvgPool(Var),
    BroadcastSpatial(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Narrow {
        input: Var,
        start: usize,
    },
    Mean(Var),
    Sum(Var),
    Abs(Var),
    Square(Var),
    Log(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add-scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv-transpose2d",
            Op::InstanceNorm { .. } => "instance-norm",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky-relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::GlobalAvgPool(..) => "global-average-pool",
            Op::BroadcastSpatial(..) => "broadcast-spatial",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Log(..) => "log",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamKey>,
}

/// Instance-norm variance stabilizer.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// A recorded computation. Confined to one execution context.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    first_nonfinite: Option<String>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            first_nonfinite: None,
        }
    }

    /// Toggle recording of the first op that produced a NaN or infinity.
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Error naming the first op that produced a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        match &self.first_nonfinite {
            Some(op) => Err(TensorError::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.check_finite && self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(op.name().to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (an input under test, for example).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant copy of `v`: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn bind(&mut self, store: &ParamStore<T>, mode: Bind) -> Bound {
        let vars = store
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let train = mode == Bind::Train && p.trainable;
                let v = self.push(p.value.clone(), Op::Leaf, train);
                self.nodes[v.0].param = Some(ParamKey {
                    store: store.id(),
                    index,
                });
                v
            })
            .collect();
        Bound {
            store: store.id(),
            vars,
        }
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var) -> Result<(&Tensor<T>, &Tensor<T>)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_mismatch(op, ta.shape(), tb.shape()));
        }
        Ok((ta, tb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary("add", a, b)?;
        let out = ta.zip_map(tb, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary("sub", a, b)?;
        let out = ta.zip_map(tb, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary("mul", a, b)?;
        let out = ta.zip_map(tb, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.nodes[a.0].value.map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), k, n),
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {:?}", t.shape())));
        }
        let out = transpose2(t);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    // ---- convolution --------------------------------------------------------

    /// `input (C,H,W)`, `weight (O,C,kh,kw)`, optional `bias (O)`; zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        if x.rank() != 3 || w.rank() != 4 || w.shape()[1] != x.shape()[0] {
            return Err(shape_mismatch("conv2d", x.shape(), w.shape()));
        }
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let geom = ConvGeometry::new(c, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| shape_mismatch("conv2d", x.shape(), w.shape()))?;
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [o] {
                return Err(shape_mismatch("conv2d bias", bs, &[o]));
            }
        }
        let p = geom.col_cols();
        let mut cols = vec![T::zero(); geom.col_rows() * p];
        im2col(x.data(), &geom, &mut cols);
        let mut out = vec![T::zero(); o * p];
        gemm(
            MatRef::new(w.data(), o, geom.col_rows()),
            MatRef::new(&cols, geom.col_rows(), p),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.nodes[b.0].value.data(), p);
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        let value = Tensor::new(vec![o, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// `input (Ci,H,W)`, `weight (Ci,Co,k,k)`, optional `bias (Co)`.
    /// Output extent is `(H-1)*stride - 2*pad + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        if x.rank() != 3 || w.rank() != 4 || w.shape()[0] != x.shape()[0] {
            return Err(shape_mismatch("conv-transpose2d", x.shape(), w.shape()));
        }
        if stride == 0 || output_padding >= stride {
            return Err(invalid(
                "conv-transpose2d",
                "output_padding must be smaller than a nonzero stride",
            ));
        }
        let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = ((h - 1) * stride + kh + output_padding)
            .checked_sub(2 * pad)
            .ok_or_else(|| invalid("conv-transpose2d", "padding exceeds output"))?;
        let ow = ((wd - 1) * stride + kw + output_padding)
            .checked_sub(2 * pad)
            .ok_or_else(|| invalid("conv-transpose2d", "padding exceeds output"))?;
        let geom = ConvGeometry::new(co, oh, ow, kh, kw, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| shape_mismatch("conv-transpose2d", x.shape(), w.shape()))?;
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [co] {
                return Err(shape_mismatch("conv-transpose2d bias", bs, &[co]));
            }
        }
        let hw = h * wd;
        let mut cols = vec![T::zero(); geom.col_rows() * hw];
        gemm(
            MatRef::new(w.data(), ci, geom.col_rows()).t(),
            MatRef::new(x.data(), ci, hw),
            &mut cols,
            false,
        );
        let mut out = vec![T::zero(); co * oh * ow];
        col2im(&cols, &geom, &mut out);
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.nodes[b.0].value.data(), oh * ow);
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        let value = Tensor::new(vec![co, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    // ---- normalization and activations -------------------------------------

    /// Per-channel normalization over all trailing axes, no affine transform.
    pub fn instance_norm(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        if x.rank() < 2 {
            return Err(invalid("instance-norm", format!("expected rank >= 2, got {:?}", x.shape())));
        }
        let c = x.shape()[0];
        let n = x.numel() / c.max(1);
        let nf = T::from_usize(n).unwrap();
        let eps = T::from_f64_lossy(INSTANCE_NORM_EPS);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let src = &x.data()[ch * n..(ch + 1) * n];
            let mean = reduce_sum(src) / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for (d, &v) in xhat[ch * n..(ch + 1) * n].iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), xhat.clone())?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::InstanceNorm { input, xhat, inv_std }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.nodes[a.0].value.map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(&[a]);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if axis >= x.rank() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| out[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax { input: a, axis }, rg))
    }

    // ---- shape ops ----------------------------------------------------------

    /// `(C, ...)` to `(C)` by averaging the trailing axes.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if x.rank() < 2 {
            return Err(invalid("global-average-pool", format!("expected rank >= 2, got {:?}", x.shape())));
        }
        let c = x.shape()[0];
        let n = x.numel() / c.max(1);
        let nf = T::from_usize(n).unwrap();
        let out: Vec<T> = x.data().chunks(n.max(1)).map(|ch| reduce_sum(ch) / nf).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c], out)?, Op::GlobalAvgPool(a), rg))
    }

    /// `(C)` to `(C, h, w)` by repeating each entry over the plane.
    pub fn broadcast_spatial(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if x.rank() != 1 {
            return Err(invalid("broadcast-spatial", format!("expected rank 1, got {:?}", x.shape())));
        }
        let c = x.numel();
        let mut out = Vec::with_capacity(c * h * w);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::BroadcastSpatial(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != x.numel() {
            return Err(shape_mismatch("reshape", x.shape(), shape));
        }
        let value = x.reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenate along axis 0 (channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let tail = self.nodes[first.0].value.shape()[1..].to_vec();
        let mut outer = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(shape_mismatch("concat", self.nodes[first.0].value.shape(), t.shape()));
            }
            outer += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![outer];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Slice `len` entries along axis 0 starting at `start`.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.nodes[a.0].value.narrow0(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Narrow { input: a, start }, rg))
    }

    // ---- reductions and pointwise ------------------------------------------

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let v = reduce_sum(x.data()) / T::from_usize(x.numel().max(1)).unwrap();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = reduce_sum(self.nodes[a.0].value.data());
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Sum(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x.abs());
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x.ln());
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg)
    }

    /// Dispatch by catalog kind. Convolutions take an optional third input as bias.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() < n {
                Err(invalid("apply", format!("{kind} expects {n} inputs, got {}", inputs.len())))
            } else {
                Ok(())
            }
        };
        let s = T::from_f64_lossy(attrs.scalar);
        match kind {
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Conv2d => {
                arity(2)?;
                self.conv2d(inputs[0], inputs[1], inputs.get(2).copied(), attrs.stride, attrs.pad)
            }
            OpKind::ConvTranspose2d => {
                arity(2)?;
                self.conv_transpose2d(
                    inputs[0],
                    inputs[1],
                    inputs.get(2).copied(),
                    attrs.stride,
                    attrs.pad,
                    attrs.output_padding,
                )
            }
            OpKind::Concat => self.concat(inputs),
            _ => {
                arity(1)?;
                let a = inputs[0];
                match kind {
                    OpKind::Scale => Ok(self.scale(a, s)),
                    OpKind::AddScalar => Ok(self.add_scalar(a, s)),
                    OpKind::Transpose => self.transpose(a),
                    OpKind::InstanceNorm => self.instance_norm(a),
                    OpKind::Relu => Ok(self.relu(a)),
                    OpKind::LeakyRelu => Ok(self.leaky_relu(a, s)),
                    OpKind::Tanh => Ok(self.tanh(a)),
                    OpKind::Sigmoid => Ok(self.sigmoid(a)),
                    OpKind::Softmax => self.softmax(a, attrs.axis),
                    OpKind::GlobalAvgPool => self.global_avg_pool(a),
                    OpKind::BroadcastSpatial => {
                        let (h, w) = match attrs.shape[..] {
                            [h, w] => (h, w),
                            _ => return Err(invalid("broadcast-spatial", "attrs.shape must be [h, w]")),
                        };
                        self.broadcast_spatial(a, h, w)
                    }
                    OpKind::Reshape => self.reshape(a, &attrs.shape),
                    OpKind::Narrow => self.narrow(a, attrs.start, attrs.len),
                    OpKind::Mean => Ok(self.mean(a)),
                    OpKind::Sum => Ok(self.sum(a)),
                    OpKind::Abs => Ok(self.abs(a)),
                    OpKind::Square => Ok(self.square(a)),
                    OpKind::Log => Ok(self.log(a)),
                    _ => unreachable!("multi-input kinds handled above"),
                }
            }
        }
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Nodes that do not require
    /// gradients are skipped.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lt.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.filter(|_| n.requires_grad).map(|k| (k, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y)?);
                }
                if want(*b) {
                    accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let gm = MatRef::new(g.data(), m, n);
                if want(*a) {
                    let mut out = vec![T::zero(); m * k];
                    gemm(gm, MatRef::new(tb.data(), k, n).t(), &mut out, false);
                    accumulate(grads, *a, Tensor::new(vec![m, k], out)?);
                }
                if want(*b) {
                    let mut out = vec![T::zero(); k * n];
                    gemm(MatRef::new(ta.data(), m, k).t(), gm, &mut out, false);
                    accumulate(grads, *b, Tensor::new(vec![k, n], out)?);
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, transpose2(g)),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let w = val(*weight);
                let o = w.shape()[0];
                let p = geom.col_cols();
                let gm = MatRef::new(g.data(), o, p);
                if want(*weight) {
                    let mut dw = vec![T::zero(); o * geom.col_rows()];
                    gemm(gm, MatRef::new(cols, geom.col_rows(), p).t(), &mut dw, false);
                    accumulate(grads, *weight, Tensor::new(w.shape().to_vec(), dw)?);
                }
                if want(*input) {
                    let mut dcols = vec![T::zero(); geom.col_rows() * p];
                    gemm(MatRef::new(w.data(), o, geom.col_rows()).t(), gm, &mut dcols, false);
                    let mut dx = vec![T::zero(); geom.channels * geom.height * geom.width];
                    col2im(&dcols, geom, &mut dx);
                    if fault::conv2d_sign_flipped() {
                        dx.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(grads, *input, Tensor::new(val(*input).shape().to_vec(), dx)?);
                }
                if let Some(b) = bias.filter(|b| want(*b)) {
                    accumulate(grads, b, channel_sums(g.data(), o, p)?);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let ci = x.shape()[0];
                let hw = geom.col_cols();
                let mut dcols = vec![T::zero(); geom.col_rows() * hw];
                im2col(g.data(), geom, &mut dcols);
                let dc = MatRef::new(&dcols, geom.col_rows(), hw);
                if want(*input) {
                    let mut dx = vec![T::zero(); ci * hw];
                    gemm(MatRef::new(w.data(), ci, geom.col_rows()), dc, &mut dx, false);
                    accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                if want(*weight) {
                    let mut dw = vec![T::zero(); ci * geom.col_rows()];
                    gemm(MatRef::new(x.data(), ci, hw), dc.t(), &mut dw, false);
                    accumulate(grads, *weight, Tensor::new(w.shape().to_vec(), dw)?);
                }
                if let Some(b) = bias.filter(|b| want(*b)) {
                    accumulate(grads, b, channel_sums(g.data(), geom.channels, geom.height * geom.width)?);
                }
            }
            Op::InstanceNorm { input, xhat, inv_std } => {
                let c = inv_std.len();
                let n = xhat.len() / c.max(1);
                let nf = T::from_usize(n).unwrap();
                let mut dx = vec![T::zero(); xhat.len()];
                for ch in 0..c {
                    let gs = &g.data()[ch * n..(ch + 1) * n];
                    let xs = &xhat[ch * n..(ch + 1) * n];
                    let sum_g: T = gs.iter().copied().sum();
                    let sum_gx: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                    let k = inv_std[ch] / nf;
                    for j in 0..n {
                        dx[ch * n + j] = k * (nf * gs[j] - sum_g - xs[j] * sum_gx);
                    }
                }
                accumulate(grads, *input, Tensor::new(val(*input).shape().to_vec(), dx)?);
            }
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })?;
                accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let d = g.zip_map(val(*a), |gv, x| if x > T::zero() { gv } else { gv * s })?;
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (T::one() - y * y))?;
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y))?;
                accumulate(grads, *a, d);
            }
            Op::Softmax { input, axis } => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let mut dx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *input, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::GlobalAvgPool(a) => {
                let x = val(*a);
                let c = x.shape()[0];
                let n = x.numel() / c.max(1);
                let inv = T::one() / T::from_usize(n).unwrap();
                let mut dx = Vec::with_capacity(x.numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, n));
                }
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::BroadcastSpatial(a) => {
                let c = val(*a).numel();
                let plane = g.numel() / c.max(1);
                let dx: Vec<T> = g.data().chunks(plane.max(1)).map(|ch| ch.iter().copied().sum()).collect();
                accumulate(grads, *a, Tensor::new(vec![c], dx)?);
            }
            Op::Reshape(a) => accumulate(grads, *a, g.reshape(val(*a).shape().to_vec())?),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).shape()[0];
                    if want(*p) {
                        accumulate(grads, *p, g.narrow0(offset, len)?);
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, start } => {
                let x = val(*input);
                let inner: usize = x.shape()[1..].iter().product();
                let mut dx = vec![T::zero(); x.numel()];
                dx[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::Mean(a) => {
                let x = val(*a);
                let gv = g.data()[0] / T::from_usize(x.numel().max(1)).unwrap();
                accumulate(grads, *a, Tensor::full(x.shape().to_vec(), gv));
            }
            Op::Sum(a) => {
                let x = val(*a);
                accumulate(grads, *a, Tensor::full(x.shape().to_vec(), g.data()[0]));
            }
            Op::Abs(a) => {
                let d = g.zip_map(val(*a), |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })?;
                accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let two = T::one() + T::one();
                accumulate(grads, *a, g.zip_map(val(*a), |gv, x| gv * two * x)?);
            }
            Op::Log(a) => {
                accumulate(grads, *a, g.zip_map(val(*a), |gv, x| gv / x)?);
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamKey, usize)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to any node that required it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Add parameter gradients into `store`'s accumulators. Returns how many
    /// parameters received a gradient.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> usize {
        let mut count = 0;
        for (key, node) in &self.params {
            if key.store != store.id() {
                continue;
            }
            if let Some(g) = &self.grads[*node] {
                let p = store.get_mut(key.index);
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
                count += 1;
            }
        }
        count
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose2<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose shape")
}

fn add_channel_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    for (ch, &b) in out.chunks_mut(plane).zip(bias) {
        ch.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<T: Float>(g: &[T], channels: usize, plane: usize) -> Result<Tensor<T>> {
    let sums = g.chunks(plane).map(|ch| ch.iter().copied().sum()).collect();
    Tensor::new(vec![channels], sums)
}

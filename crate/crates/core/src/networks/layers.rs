//! Parameter registration and the small layer vocabulary the networks share.

use guidegan_tensor::{Bound, Float, Graph, ParamStore, Result, Tensor, Var};

use crate::seed;

/// Registers parameters with per-name random streams, so a network's initial
/// weights do not depend on which other parameters exist.
pub struct Init<'a, T: Float> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
    pub std: f64,
    /// Component label mixed into each parameter's random stream.
    pub component: &'a str,
}

impl<T: Float> Init<'_, T> {
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> usize {
        let mut rng = seed::stream(self.seed, &format!("{}/{}", self.component, name));
        let value = Tensor::randn(shape.to_vec(), self.std, &mut rng);
        self.store.add(name, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.store.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn identity(&mut self, name: &str, n: usize) -> usize {
        let value = Tensor::from_fn(vec![n, n], |i| if i / n == i % n { T::one() } else { T::zero() });
        self.store.add(name, value)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv {
        Conv {
            weight: self.normal(&format!("{name}.weight"), &[cout, cin, k, k]),
            bias: Some(self.zeros(&format!("{name}.bias"), &[cout])),
            stride,
            pad,
        }
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize, bias: bool) -> Linear {
        Linear {
            weight: self.normal(&format!("{name}.weight"), &[cout, cin]),
            bias: bias.then(|| self.zeros(&format!("{name}.bias"), &[cout, 1])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.stride, self.pad)
    }
}

/// 2x upsampling transposed convolution (k3, s2, p1, output padding 1).
#[derive(Clone, Debug)]
pub struct Up {
    pub weight: usize,
    pub bias: usize,
}

impl Up {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, p[self.weight], Some(p[self.bias]), 2, 1, 1)
    }
}

/// `y = W x (+ b)` on column vectors `(n, 1)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Linear {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(p[self.weight], x)?;
        match self.bias {
            Some(b) => g.add(y, p[b]),
            None => Ok(y),
        }
    }
}

/// Column vector view `(n, 1)` of a rank-1 node.
pub fn column<T: Float>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let n = g.value(v).numel();
    g.reshape(v, &[n, 1])
}

/// Rank-1 view of any node.
pub fn flat<T: Float>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let n = g.value(v).numel();
    g.reshape(v, &[n])
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky<T: Float>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, T::from_f64_lossy(LEAKY_SLOPE))
}

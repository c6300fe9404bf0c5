//! A small reverse-mode automatic differentiation engine over dense
//! `f32`/`f64` tensors, with the op catalog needed by convolutional GANs,
//! plus a portable binary tensor archive.

pub mod archive;
pub mod error;
pub mod fault;
mod float;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod param;
mod tensor;

pub use archive::{AnyTensor, TensorArchive};
pub use error::{Result, TensorError};
pub use float::{DType, Float};
pub use gradcheck::{check_catalog, check_gradient, GradCheckReport, OpCheck};
pub use graph::{Bind, Bound, Gradients, Graph, OpAttrs, OpKind, ParamKey, Var, INSTANCE_NORM_EPS};
pub use kernels::{is_deterministic, set_deterministic};
pub use param::{ParamStore, Parameter, StoreId};
pub use tensor::Tensor;

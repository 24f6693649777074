//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! All kernels are generic over [`Float`], so the same network code runs in
//! `f32` for training and inference and in `f64` for finite-difference checks.

pub mod error;
pub mod float;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use error::{Result, TensorError};
pub use float::{gemm, Float, MatView};
pub use graph::{Gradients, Graph, Var};
pub use ops::*;
pub use tensor::{strides_of, Tensor};

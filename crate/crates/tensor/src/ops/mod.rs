//! Differentiable operations, exposed as methods on [`Graph`](crate::Graph),
//! plus plain tensor kernels that need no tape.

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod shape;
pub mod spatial;

pub use elementwise::{gelu_scalar, sigmoid_scalar};
pub use linalg::matmul;
pub use norm::{softmax_last, BatchStats};
pub use shape::{concat, permute, slice_axis};
pub use spatial::{avg_pool, resize_bilinear, roll2d, window_partition, window_reverse};

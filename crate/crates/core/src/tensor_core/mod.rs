//! Dense tensors, the operator kernels the network layers need, a reverse-mode
//! tape over those kernels, and a finite-difference gradient oracle.

mod gradcheck;
mod graph;
pub mod ops;
mod tensor;
pub mod tsb1;

pub use gradcheck::{finite_diff_check, relative_error, DEFAULT_STEP};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{conv1d, gelu, instance_norm, linear, mean_over_time, softmax, Padding};
pub use tensor::Tensor;

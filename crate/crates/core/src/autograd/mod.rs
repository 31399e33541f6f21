//! Dense tensors and a reverse-mode autodiff tape with higher-order gradients.

mod graph;
pub mod kernels;
pub mod ops;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::{
    avg_pool1d, avg_pool_tensor, conv1d, group_norm, linear, max_pool1d, DEFAULT_GN_EPS,
};
pub use tensor::Tensor;

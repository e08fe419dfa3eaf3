//! Minimal dense autodiff used by the pose regressor.

mod graph;
mod mat;

pub use graph::{softplus, Grads, Graph, Var};
pub use mat::{matmul, Mat};

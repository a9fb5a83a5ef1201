//! Dense `f64` tensors and a reverse-mode tape over them.

mod graph;
mod tensor;

pub use graph::{Graph, Primitive, Var, LAYER_NORM_EPS, LOG_FLOOR};
pub use tensor::Tensor;

//! Dense tensors, reverse-mode autodiff and the Adam optimizer.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::{clip_global_norm, AdamState};
pub use graph::{gelu_scalar, Gradients, Graph, Var};
pub use params::{Bound, Param, ParamStore};
pub use tensor::{Real, Tensor};

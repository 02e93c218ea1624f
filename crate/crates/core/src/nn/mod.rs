//! Minimal dense autograd used by the predictor.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Var, GATHER_ZERO};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

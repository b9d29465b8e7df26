//! Reverse-mode automatic differentiation over dense `f64` tensors, with the
//! handful of layers and the Adam optimiser needed by the agents.

pub mod check;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Grads, Graph, Var};
pub use nn::Binding;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

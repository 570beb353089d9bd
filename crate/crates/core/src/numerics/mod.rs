//! Minimal dense tensor type with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit floats: the toolkit runs at desk scale, where
//! precision for gradient checking matters more than speed. A [`Graph`] is
//! rebuilt for every forward pass (sequence lengths vary), records each
//! executed operation, and replays them in reverse on [`Graph::backward`].

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, TensorId};
pub use tensor::Tensor;

//! Minimal NCHW tensor engine with reverse-mode differentiation.

mod conv;
pub mod gradcheck;
mod graph;
mod quantize;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use quantize::{quantize, Quantizer};
pub use tensor::{Real, Tensor};

//! Dense fp64 tensors, seeded randomness and reverse-mode differentiation.

pub mod graph;
pub mod kernels;
mod rng;
mod tensor;

pub use graph::{Graph, GraphStats, Var};
pub use rng::Rng;
pub use tensor::Tensor;

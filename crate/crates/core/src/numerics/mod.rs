//! Tensors, reverse-mode gradients and seeded randomness.

mod graph;
mod rng;
mod tensor;

pub use graph::{finite_diff, Gradients, Graph, NodeId, Op};
pub use rng::{derive_seed, Rng};
pub use tensor::{add, cross_entropy, matmul, matmul_nt, matmul_tn, mean_pool, relu, row_softmax, scale, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Enough machinery for small conv/dense classifiers, PGD input gradients,
//! and temperature-scaled softmax losses: f32 storage, f64 accumulation in
//! reductions, define-by-run graph rebuilt on every forward pass.

mod graph;
mod kernels;
mod tensor;

pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("softmax temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by backward; run a new forward pass first")]
    GraphConsumed,
    #[error("non-finite value detected in {0}")]
    NonFinite(String),
}

//! Dense tensors, a recording tape for reverse-mode gradients, seeded random
//! streams and the checkpoint file format.

mod checkpoint;
pub mod gradcheck;
pub mod rng;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use tape::{sigmoid, Gradients, Tape, Var, LAYER_NORM_EPS, LOG_GUARD};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: zero-norm row (cosine similarity undefined)")]
    ZeroNorm { op: &'static str },
    #[error("{op}: reduction over zero rows")]
    EmptyReduction { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("mask has no active pixel")]
    EmptyMask,
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("feature depth {depth} too small for {required} orthonormal basis vectors")]
    DepthTooSmall { depth: usize, required: usize },
    #[error("infeasible dataset spec: {0}")]
    InfeasibleSpec(String),
    #[error("map {height}x{width} too small for down-scaling")]
    TooSmall { height: usize, width: usize },
    #[error("class universes differ: {0}")]
    MismatchedClasses(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

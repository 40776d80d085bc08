//! Crate-wide error type.

use thiserror::Error;

/// Errors shared across maps, problems, optimizers and the CLI harness.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical divergence at iteration {k}: f = {f:.6e} exceeds {limit:.6e}")]
    Divergence { k: usize, f: f64, limit: f64 },

    #[error("meta-training divergence at meta-iteration {iter}: loss {loss:.6e} exceeds {limit:.6e}")]
    MetaDivergence { iter: usize, loss: f64, limit: f64 },

    #[error("non-finite trajectory value at unroll step {k}")]
    NonFiniteTrajectory { k: usize },

    #[error("non-finite meta-gradient at iterate index {k}")]
    NonFiniteMetaGradient { k: usize },

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenient result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

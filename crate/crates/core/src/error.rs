use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid dataset at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel bandwidth is zero: all points coincide at their k-th neighbor")]
    DegenerateBandwidth,

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e}, tolerance {tolerance:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("solver produced a negative score {value:e} at node {node}")]
    NegativeScore { node: usize, value: f64 },

    #[error("index {index} out of range (size {size})")]
    OutOfRange { index: usize, size: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("{0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

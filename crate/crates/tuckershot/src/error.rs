use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible dimensions (tensor shapes, matrix products, layer chains).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter is out of its valid range (ranks, modes, learning rates).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Non-finite values or a numerical routine that failed to converge.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed model/rank/tensor files or spec-weight inconsistencies.
    #[error("model error: {0}")]
    Model(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input bytes (bad magic number, truncated stream).
    #[error("format error: {0}")]
    Format(String),

    /// Inputs that are individually valid but disagree with each other.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum NmfError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("negative entry {value} at row {row}, column {col}")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unknown builtin matrix `{0}`")]
    UnknownBuiltin(String),

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("gradient is singular at {0}; trigger sparsity-pattern integration")]
    Singularity(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("subproblem solve failed: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, NmfError>;

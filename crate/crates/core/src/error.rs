use thiserror::Error;

/// Errors surfaced by the library. Every fallible operation returns one of
/// these instead of panicking.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {invariant}")]
    InvalidConfig { invariant: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("zero denominator at query row {row}")]
    ZeroDenominator { row: usize },

    #[error("dimension {dim} must be even for rotary embedding")]
    OddDimension { dim: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed parameter blob: {0}")]
    Blob(String),

    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(context: &'static str, expected: impl ToString, actual: impl ToString) -> Error {
    Error::ShapeMismatch {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

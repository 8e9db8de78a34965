//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("cosine similarity undefined for zero-norm vector")]
    UndefinedSimilarity,

    #[error("degenerate subspace: {0}")]
    DegenerateSubspace(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("projection basis rank collapse: {0}")]
    RankCollapse(String),

    #[error("training failed: {0}")]
    TrainingFailure(String),

    #[error("corpus capacity exceeded: {0}")]
    Capacity(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("task score undefined: accuracy bounds too close ({upper} - {lower})")]
    UndefinedScore { lower: f64, upper: f64 },

    #[error("layer {0} is not hooked or captured")]
    InvalidLayer(usize),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

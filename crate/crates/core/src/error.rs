use thiserror::Error;

/// Errors produced while loading cases or building and solving relaxations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("degree overflow: term {term} exceeds degree {limit}")]
    DegreeOverflow { term: String, limit: u32 },

    #[error("unknown case `{name}` (available: {available})")]
    UnknownCase { name: String, available: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

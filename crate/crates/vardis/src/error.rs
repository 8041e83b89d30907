use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map onto the failure classes of the
/// pipeline stages: data ingestion, tokenization, model evaluation,
/// training, decoding, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("vocab error: {0}")]
    Vocab(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("context length {len} exceeds maximum {max}")]
    ContextLength { len: usize, max: usize },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("enumeration guard: {0}")]
    EnumerationGuard(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

use thiserror::Error;

/// Errors produced across the engine, model and runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate softmax row {row}: every entry is masked")]
    DegenerateRow { row: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint digest mismatch")]
    Digest,
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

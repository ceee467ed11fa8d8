use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence length {actual} exceeds the position limit {limit}")]
    Length { actual: usize, limit: usize },

    #[error("degenerate batch: no unmasked target positions")]
    DegenerateBatch,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("in {path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("llm client error: {0}")]
    Client(String),
}

pub type Result<T> = std::result::Result<T, Error>;

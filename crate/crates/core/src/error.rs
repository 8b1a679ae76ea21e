use thiserror::Error;

/// Errors produced across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument or data value violates a documented precondition.
    #[error("invalid input: {0}")]
    Validation(String),

    /// A file does not match its expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// A file is well formed but uses a feature we do not read.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Training produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("backward error: {0}")]
    Backward(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error in {file} at byte {offset}: {message}")]
    Format {
        file: String,
        offset: u64,
        message: String,
    },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training diverged at step {step} (last good checkpoint: {last_good:?})")]
    Diverged {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn format_err(file: impl Into<String>, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        file: file.into(),
        offset,
        message: message.into(),
    }
}

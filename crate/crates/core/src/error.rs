//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad dimensions, out-of-range hyperparameters,
    /// triggers that do not fit the image, and similar construction-time
    /// problems.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input: labels out of range, empty sets where data is
    /// required, subsample sizes larger than the dataset.
    #[error("input error: {0}")]
    Input(String),

    /// Malformed binary dataset file. The message names the offending field.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

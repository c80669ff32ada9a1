//! Error type shared by the whole crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis disagreement between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation was called outside its contract (e.g. backward on a
    /// non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// An integer index (token id, axis, position) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Malformed or non-finite input data.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed text input (corpus line, config file, `--set` override).
    #[error("parse error: {0}")]
    Parse(String),

    /// An architecture or training configuration violates an invariant.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint could not be read or written.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}

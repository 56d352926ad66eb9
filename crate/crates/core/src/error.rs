use std::fmt;

/// Errors raised by the tensor engine, the model, and the data harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl fmt::Display) -> Self {
        Error::Dimension(msg.to_string())
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Error::Data(msg.to_string())
    }
}

use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {what} (size {size})")]
    OutOfRange {
        what: String,
        index: usize,
        size: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("corrupt checkpoint at byte {offset}: {msg}")]
    Corrupt { offset: usize, msg: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn out_of_range(what: impl Into<String>, index: usize, size: usize) -> Self {
        Error::OutOfRange {
            what: what.into(),
            index,
            size,
        }
    }

    /// True when the failure comes from a non-finite value or a diverging computation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

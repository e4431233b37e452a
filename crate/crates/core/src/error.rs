//! Crate-wide error type and result alias.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensors, layers, loaders, and the training loop.
#[derive(Debug)]
pub enum Error {
    /// Two operands had incompatible shapes; both are reported.
    Shape {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An ordering or recorded-state contract was violated by the caller.
    Contract { context: String },
    /// A non-finite value surfaced where the library guarantees finite output.
    NonFinite { context: String },
    /// Invalid configuration (unknown key, bad value, inconsistent sizes).
    Config { message: String },
    /// Dataset or file-format problem (bad magic, truncation, count mismatch).
    Data { message: String },
    /// Checkpoint problem (version mismatch, checksum failure, missing tensor).
    Checkpoint { message: String },
    /// A class label outside `1..=classes`.
    LabelOutOfRange { label: u32, classes: usize },
    Io(std::io::Error),
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::Config {
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Error::Data {
            message: message.into(),
        }
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Error::Checkpoint {
            message: message.into(),
        }
    }

    pub fn contract(context: impl Into<String>) -> Self {
        Error::Contract {
            context: context.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                context,
                left,
                right,
            } => write!(f, "shape mismatch in {context}: {left:?} vs {right:?}"),
            Error::Contract { context } => write!(f, "contract violation: {context}"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::Config { message } => write!(f, "config error: {message}"),
            Error::Data { message } => write!(f, "data error: {message}"),
            Error::Checkpoint { message } => write!(f, "checkpoint error: {message}"),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range 1..={classes}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

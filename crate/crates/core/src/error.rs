use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),

    #[error("index {id} out of vocabulary of size {size}")]
    OutOfVocab { id: usize, size: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input file or record; `locator` names the line, record or entry.
    #[error("format error at {locator}: {message}")]
    Format { locator: String, message: String },

    #[error("corrupt example {id}: {message}")]
    CorruptExample { id: String, message: String },

    #[error("incompatible parameters: {}", .0.join(", "))]
    Incompatible(Vec<String>),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at step {step}: {message}")]
    Divergence { step: u64, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(locator: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            locator: locator.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

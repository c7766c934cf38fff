use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the nl3d library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (shape mismatch, bad range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("weight file: {0}")]
    WeightFile(#[from] WeightFileError),

    #[error("clip file {path}: {msg}")]
    ClipFormat { path: PathBuf, msg: String },

    #[error("manifest {path} line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    /// Training produced a non-finite loss.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// Distinct failure modes when reading an `NLW1` weight file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightFileError {
    #[error("bad magic bytes {0:?}, expected \"NLW1\"")]
    BadMagic([u8; 4]),
    #[error("file truncated while reading {0}")]
    Truncated(String),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("unexpected tensor {0:?}")]
    UnknownName(String),
    #[error("missing tensor {0:?}")]
    MissingName(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

/// Returns a [`Error::Contract`] from the enclosing function unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;

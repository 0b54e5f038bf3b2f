//! Crate-wide error type.
//!
//! Everything user-facing funnels through [`Error`] so the CLI can map
//! failures onto its two non-zero exit codes: I/O problems exit with 2,
//! every other (validation, parse, numeric) failure exits with 1.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument, configuration value, or shape.
    #[error("{0}")]
    Invalid(String),

    /// Malformed data file; reports the offending line.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Numerical failure, e.g. a NaN loss or gradient.
    #[error("{0}")]
    Numeric(String),

    /// Filesystem failure with the path that caused it.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

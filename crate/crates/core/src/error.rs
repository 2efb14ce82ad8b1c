//! Crate-wide error type.

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input row; carries the file and 1-based line when known.
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    /// Rejected arguments or an inconsistent configuration.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Missing or misaligned market data (names the offending node/hour).
    #[error("data gap: {0}")]
    Gap(String),

    /// A math operation left its domain (log of a non-positive value, etc.).
    #[error("domain error: {0}")]
    Domain(String),

    /// No assignment satisfies the constraints; names the binding class.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A guard against enumeration blow-ups refused to run.
    #[error("budget exceeded: {0}")]
    Budget(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn parse(path: &Path, line: u64, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.
//!
//! Errors are split into two broad classes so that the CLI can map them onto
//! stable exit codes: [`Error::Input`] (bad data, schema violations, invalid
//! configuration) and [`Error::Numerical`] (solver breakdowns, rank
//! deficiency, non-convergence). I/O failures carry the offending path.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input: malformed files, schema violations, precondition
    /// failures on user-supplied data or configuration.
    #[error("invalid input: {0}")]
    Input(String),

    /// Numerical failure: non-convergence, rank deficiency, indefinite
    /// covariance, and similar solver-level breakdowns.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI contract: 2 for input errors, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

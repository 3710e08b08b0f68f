//! Crate-wide error type and result alias.
//!
//! Two broad failure families matter to callers: *validation* errors (bad
//! configuration, malformed or inconsistent input content) and *I/O* errors
//! (filesystem failures). The CLI maps them to exit codes 1 and 2.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Filesystem-level failure (missing file, unreadable, unwritable).
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON content. Treated as a validation failure by the CLI:
    /// the file was readable, its content was not acceptable.
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Any semantic rejection: shape mismatches, out-of-range labels,
    /// non-finite values, infeasible configurations, unknown ids.
    #[error("{0}")]
    Validation(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Exit code the CLI reports for this error (1 validation, 2 I/O).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Json { .. } | Error::Validation(_) => 1,
        }
    }
}

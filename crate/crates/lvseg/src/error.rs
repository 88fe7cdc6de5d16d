//! Crate-wide error type and result alias.

use std::path::PathBuf;

/// Anything that can go wrong across ingestion, training, harmonization and
/// evaluation. Variants carry enough context (paths, shapes, names) that the
/// CLI can print actionable messages without a backtrace.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid volume file {path}: {reason}")]
    VolumeFormat { path: PathBuf, reason: String },

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("configuration error: {reason}")]
    Config { reason: String },

    #[error("validation failed: {reason}")]
    Validation { reason: String },

    #[error("{context}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("parameter out of range: {reason}")]
    Parameter { reason: String },

    #[error("weight archive {path}: {reason}")]
    Archive { path: PathBuf, reason: String },

    #[error("incompatible model: {reason}")]
    Incompatible { reason: String },

    #[error("training failed: {reason}")]
    Training { reason: String },
}

impl Error {
    /// Wrap an `std::io::Error` together with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(reason: impl Into<String>) -> Self {
        Error::Config {
            reason: reason.into(),
        }
    }

    pub fn validation(reason: impl Into<String>) -> Self {
        Error::Validation {
            reason: reason.into(),
        }
    }

    pub fn parameter(reason: impl Into<String>) -> Self {
        Error::Parameter {
            reason: reason.into(),
        }
    }

    /// Exit code the CLI maps this error to: 1 for user/config/validation
    /// problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::Validation { .. }
            | Error::Manifest { .. }
            | Error::Parameter { .. }
            | Error::ShapeMismatch { .. }
            | Error::Incompatible { .. } => 1,
            Error::Io { .. }
            | Error::VolumeFormat { .. }
            | Error::Archive { .. }
            | Error::Training { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

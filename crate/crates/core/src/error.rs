//! Error type shared across the crate.

use std::path::Path;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// I/O failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed header in a CSV input.
    #[error("{path}: header: {msg}")]
    Header { path: String, msg: String },

    /// Malformed data row in a CSV input. `row` is the 1-based data row
    /// number (the header is not counted).
    #[error("{path}: row {row}: {msg}")]
    Row { path: String, row: usize, msg: String },

    /// Malformed JSON or model file.
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    /// A precondition on inputs or configuration does not hold.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Column / length mismatch between related arrays.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    /// The attacker training split lacked one of the two attribute values
    /// even after reshuffling.
    #[error("degenerate split: an attribute value is missing from the attacker training split after {attempts} reshuffles")]
    DegenerateSplit { attempts: usize },
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn header(path: &Path, msg: impl Into<String>) -> Self {
        Error::Header {
            path: path.display().to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn row(path: &Path, row: usize, msg: impl Into<String>) -> Self {
        Error::Row {
            path: path.display().to_string(),
            row,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(path: &Path, msg: impl ToString) -> Self {
        Error::Format {
            path: path.display().to_string(),
            msg: msg.to_string(),
        }
    }
}

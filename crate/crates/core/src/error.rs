//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands with incompatible shapes.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An argument that is structurally wrong for the operation
    /// (bad rank, bad index, bad hyperparameter, ...).
    #[error("{op}: {what}")]
    Invalid { op: &'static str, what: String },

    /// An operation that needs at least one time step got none.
    #[error("{op}: empty sequence")]
    EmptySequence { op: &'static str },

    /// A class label outside `[0, limit)`.
    #[error("{context}: label {label} out of range (limit {limit})")]
    LabelOutOfRange {
        context: String,
        label: usize,
        limit: usize,
    },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file that exists but does not parse as the expected format.
    #[error("{path}: {what}")]
    Format { path: PathBuf, what: String },

    /// A gradient turned NaN or infinite; training must not continue.
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGrad { name: String },

    /// A checkpoint tensor exists but its shape disagrees with the config.
    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// A tensor required by the config is absent from the checkpoint.
    #[error("checkpoint missing tensor {name}")]
    MissingTensor { name: String },
}

impl Error {
    /// Shorthand for [`Error::Io`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for [`Error::Format`].
    pub fn format(path: impl Into<PathBuf>, what: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            what: what.into(),
        }
    }

    /// Shorthand for [`Error::Invalid`].
    pub fn invalid(op: &'static str, what: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            what: what.into(),
        }
    }
}

use std::io;

use thiserror::Error;

/// Errors produced by the correspondence pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of grid: {index} not in 0..{size}")]
    IndexOutOfGrid { index: usize, size: usize },

    #[error("coordinate out of grid: ({row}, {col}) not in {h}x{w}")]
    CoordOutOfGrid {
        row: usize,
        col: usize,
        h: usize,
        w: usize,
    },

    #[error("invalid grid shape {h}x{w}")]
    InvalidShape { h: usize, w: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("cosine correlation requires L2-normalized features")]
    NotNormalized,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("no evaluable cells")]
    NoEvaluableCells,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

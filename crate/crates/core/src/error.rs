use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the fitting library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: component {component:?}, {block} entry {entry} = {value}")]
    InvalidParameter {
        component: Option<usize>,
        block: &'static str,
        entry: usize,
        value: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate slice: fixed-block covariance is singular")]
    DegenerateSlice,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient: component {component}, block {block}, batch index {batch_index}")]
    NonFiniteGradient {
        component: usize,
        block: &'static str,
        batch_index: usize,
    },

    #[error("non-finite loss at iteration {iteration} (batch index {batch_index})")]
    NonFiniteLoss { iteration: u64, batch_index: usize },

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attaches a component index to an [`Error::InvalidParameter`].
    pub fn for_component(self, index: usize) -> Self {
        match self {
            Error::InvalidParameter {
                block, entry, value, ..
            } => Error::InvalidParameter {
                component: Some(index),
                block,
                entry,
                value,
            },
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

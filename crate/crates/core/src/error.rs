use std::path::PathBuf;

use thiserror::Error;

use crate::nn::MlpModel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input has length {got}, model expects {expected}")]
    InputShape { expected: usize, got: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("parameter vectors have different layouts")]
    LayoutMismatch,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),

    #[error("class {0} has no entry")]
    UnknownClass(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss. `snapshot` holds the model as it
    /// was when the failing step started.
    #[error("non-finite loss at step {step} (example {example})")]
    NumericalAbort {
        step: usize,
        example: usize,
        snapshot: Box<MlpModel>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed record: {0}")]
    Record(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TasmlError>;

#[derive(Debug, Error)]
pub enum TasmlError {
    #[error("matrix is not positive definite (jitter escalated to {max_jitter:e})")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value encountered in {context}")]
    NonFiniteValue { context: &'static str },

    #[error("invalid configuration field `{field}`: {reason}")]
    ConfigInvalid { field: String, reason: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("malformed file {path}: record {record}: {message}")]
    FileMalformed {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error("not enough classes: need {needed}, have {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("class {class_id} has {available} examples, need {needed}")]
    InsufficientExamplesPerClass {
        class_id: u32,
        needed: usize,
        available: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TasmlError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        TasmlError::ConfigInvalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        TasmlError::DimensionMismatch {
            context,
            expected,
            found,
        }
    }
}

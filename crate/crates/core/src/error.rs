use std::path::PathBuf;

/// Errors raised anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("matrix is numerically singular with damping {damping}; retry with a larger damping")]
    Singular { damping: f64 },

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("sample alignment failed: {0}")]
    Alignment(String),

    #[error("invalid feature split: {0}")]
    Split(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("embedding store: {0}")]
    Storage(String),

    #[error("invalid unlearning request: {0}")]
    Request(String),

    #[error("invalid configuration for `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("AUC is undefined: {0}")]
    UndefinedAuc(String),

    #[error("cannot compare runs: {0}")]
    Comparison(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

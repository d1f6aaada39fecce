use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::optim::EpochRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient in tensor `{tensor}` at element {index}")]
    NonFiniteGradient { tensor: String, index: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged {
        epoch: usize,
        loss: f64,
        history: Vec<EpochRecord>,
    },

    #[error("hold-out discipline violated: {stage} received a `{got}` split")]
    SplitViolation { stage: String, got: String },

    #[error("missing rank cell: metric {metric}, target {target}, seed {seed}, method {method}")]
    MissingCell {
        metric: String,
        target: String,
        seed: u64,
        method: String,
    },

    #[error("{path}: row {row}: {message}")]
    CsvRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in error JSON and failure records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Diverged { .. } => "diverged",
            Error::SplitViolation { .. } => "split_violation",
            Error::MissingCell { .. } => "missing_cell",
            Error::CsvRow { .. } => "csv_row",
            Error::Input { .. } => "input",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// File the error refers to, if any.
    pub fn path(&self) -> Option<&Path> {
        match self {
            Error::CsvRow { path, .. } | Error::Input { path, .. } | Error::Io { path, .. } => Some(path),
            _ => None,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: expected {expected} columns, found {found}")]
    RowArity {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("no input rows")]
    EmptyInput,

    #[error("row {row}: invalid label {value:?} (expected 0 or 1)")]
    InvalidLabel { row: usize, value: String },

    #[error("unknown column {0:?}")]
    UnknownColumn(String),

    #[error("field {field:?}: {kind} fields are not supported, only categorical")]
    UnsupportedFieldKind { field: String, kind: String },

    #[error("feature id {id} out of range for field {field} (size {size})")]
    IdOutOfRange { field: usize, id: usize, size: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("stale cache: {0} parameters changed since the forward pass")]
    StaleCache(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("split {0:?} is empty")]
    EmptySplit(&'static str),

    #[error("non-finite gradient in parameter {0:?}")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("AUC is undefined: labels contain a single class")]
    SingleClass,

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("model file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

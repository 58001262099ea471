use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: norm {norm:e} is not above {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("category {name:?} (index {index}) has no instances")]
    EmptyCategory { index: usize, name: String },

    #[error("centroid of category {index} is degenerate (norm {norm:e})")]
    DegenerateCentroid { index: usize, norm: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rejection budget exhausted: accepted {accepted} of {requested} unknown instances after {attempts} attempts; pappuses overlap, try a smaller n_R or a later epoch")]
    RejectionBudget {
        accepted: usize,
        requested: usize,
        attempts: usize,
    },

    #[error("non-finite loss term {term} = {value}")]
    NonFinite { term: &'static str, value: f64 },

    #[error("training aborted at epoch {epoch}: {source}")]
    TrainingAborted {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: row {row}, column {column:?}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("rows with zero norm after standardization: {rows:?}")]
    ZeroRows { rows: Vec<usize> },

    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u64, supported: u64 },

    #[error("checkpoint parse error at byte {offset}: {message}")]
    CheckpointParse { offset: usize, message: String },

    #[error("unknown {kind} {value:?}")]
    UnknownVariant { kind: &'static str, value: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

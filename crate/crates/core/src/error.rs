use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label code {value} at index {index}")]
    InvalidLabelCode { index: usize, value: i64 },

    #[error("label vector must have 14 entries, got {0}")]
    LabelLength(usize),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("study {0} has no usable views after repair")]
    NoUsableViews(String),

    #[error("attention context has no rows")]
    EmptyContext,

    #[error("study has no frontal tokens to resample")]
    MissingFrontal,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient at {0}")]
    NumericalFailure(String),

    #[error("study {0} is missing per-sentence label vectors")]
    MissingLabels(String),

    #[error("cannot normalize an empty weight set")]
    EmptyWeightSet,

    #[error("alignment error: {0}")]
    AlignmentError(String),

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("line {line_no}: {source}")]
    ParseError {
        line_no: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("corpus rejected: {bad} of {total} lines failed to parse")]
    CorpusRejected { bad: usize, total: usize },

    #[error("embedding format error: {0}")]
    FormatError(String),

    #[error("embedding payload truncated: expected {expected} bytes, found {actual}")]
    TruncationError { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

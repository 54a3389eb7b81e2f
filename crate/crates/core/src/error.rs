use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file {path}")]
    MissingFile { path: PathBuf },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {field}: {message}")]
    Malformed { field: String, message: String },

    #[error("payload length mismatch in {field}: expected {expected} bytes, found {found}")]
    PayloadLength {
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {field} at row {row}")]
    NonFinite { field: String, row: usize },

    #[error("label out of range in {field} at row {row}: {value} not below {limit}")]
    LabelOutOfRange {
        field: String,
        row: usize,
        value: i64,
        limit: usize,
    },

    #[error("dimension mismatch in {field}: expected {expected}, found {found}")]
    DimensionMismatch {
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("incomplete prototype grid: missing cell (pair {pair}, group {group})")]
    IncompleteGrid { pair: usize, group: usize },

    #[error("duplicate prototype cell (pair {pair}, group {group})")]
    DuplicateCell { pair: usize, group: usize },

    #[error("insufficient labeled rows for group {group}: {available} available, {required} required")]
    InsufficientLabeledRows {
        group: usize,
        available: usize,
        required: usize,
    },

    #[error("K exceeds ensemble size: k = {k}, N = {n}")]
    KExceedsEnsemble { k: usize, n: usize },

    #[error("invalid argument {name}: {message}")]
    InvalidArgument { name: String, message: String },

    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("empty candidate list")]
    EmptyCandidates,

    #[error("empty prediction log")]
    EmptyLog,

    #[error("TPR gap requires exactly 2 groups, log has {found}")]
    GroupCount { found: usize },

    #[error("training diverged at batch {batch} (epoch {epoch}): non-finite {what}")]
    Diverged {
        batch: usize,
        epoch: usize,
        what: &'static str,
    },

    #[error("method {method} requires a prototype ensemble")]
    MissingEnsemble { method: String },

    #[error("json error in {path}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn malformed(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Malformed {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name: name.into(),
            message: message.into(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}{}", axis.map(|a| format!(" (axis {a})")).unwrap_or_default())]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        axis: Option<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("gradient of parameter '{0}' is NaN")]
    NanGradient(String),

    #[error("unknown word '{0}'")]
    UnknownWord(String),

    #[error(transparent)]
    Dataset(#[from] DatasetError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize], axis: Option<usize>) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            axis,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

/// Validation failures when loading or building a dataset. Every variant
/// names the offending record.
#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("record {record}: unknown predicate '{predicate}'")]
    UnknownPredicate { record: String, predicate: String },
    #[error("record {record}: unknown object class '{class}'")]
    UnknownClass { record: String, class: String },
    #[error("record {record}: malformed box {bbox:?} for a {width}x{height} image")]
    MalformedBox {
        record: String,
        bbox: Vec<f64>,
        width: u32,
        height: u32,
    },
    #[error("record {record}: relation refers to object {index} but only {count} objects exist")]
    DanglingIndex { record: String, index: usize, count: usize },
    #[error("record {record}: relation has identical subject and object ({index})")]
    SelfRelation { record: String, index: usize },
    #[error("record {record}: relation without truth label in binary mode")]
    MissingTruth { record: String },
    #[error("record {record}: duplicate image id")]
    DuplicateImage { record: String },
    #[error("record {record}: relations present but fewer than 2 objects")]
    TooFewObjects { record: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsatisfiable generator config: {0}")]
    Unsatisfiable(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("parameter '{name}' has shape {found:?} but the model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("model parameter '{0}' is missing from the checkpoint")]
    MissingParameter(String),
    #[error("checkpoint parameter '{0}' does not exist in the model")]
    UnexpectedParameter(String),
    #[error("{file} is truncated: expected {expected} bytes, found {found}")]
    Truncated {
        file: String,
        expected: usize,
        found: usize,
    },
    #[error("unsupported dtype '{0}'")]
    Dtype(String),
}

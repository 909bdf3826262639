use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} (line {line}): {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error in {context}: {message}")]
    Schema { context: String, message: String },

    #[error("label length mismatch: mesh has {faces} faces but {field} has {len} entries")]
    LabelLengthMismatch {
        field: &'static str,
        faces: usize,
        len: usize,
    },

    #[error("instance {instance} mixes class labels {first} and {second}")]
    InconsistentInstance {
        instance: i32,
        first: u8,
        second: u8,
    },

    #[error("face {face}: {message}")]
    InvalidFace { face: usize, message: String },

    #[error("face {face} is degenerate (squared area {squared_area:e})")]
    DegenerateFace { face: usize, squared_area: f64 },

    #[error("mesh has {faces} faces, above the limit of {limit}")]
    TooManyFaces { faces: usize, limit: usize },

    #[error("zero spatial extent: {0}")]
    ZeroExtent(&'static str),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid class label {0}")]
    InvalidLabel(i64),

    #[error("k = {k} must be smaller than the number of points ({points})")]
    NeighborCount { k: usize, points: usize },

    #[error("no valid predictions to match")]
    NoValidPredictions,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("loss term {name} is invalid ({value})")]
    InvalidLoss { name: &'static str, value: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn schema(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            context: context.into(),
            message: message.into(),
        }
    }
}

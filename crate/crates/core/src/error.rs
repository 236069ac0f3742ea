use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("vertex {vertex} has no incident face")]
    IsolatedVertex { vertex: usize },

    #[error("vertex {vertex} is only incident to zero-area faces")]
    DegenerateNormal { vertex: usize },

    #[error("vertex {vertex} has no neighbours in the edge graph")]
    NoNeighbours { vertex: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("direction is not unit length (norm {0})")]
    NonUnitDirection(f64),

    #[error("zero-length reference edge ({0}, {1})")]
    ZeroLengthEdge(usize, usize),

    #[error("zero-length normal at index {0}")]
    ZeroNormal(usize),

    #[error("point cloud has no normals")]
    MissingNormals,

    #[error("unknown landmark id `{0}`")]
    MissingLandmark(String),

    #[error("duplicate landmark id `{0}`")]
    DuplicateLandmark(String),

    #[error("backward called without a recorded forward pass")]
    NoForward,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input not preprocessed: point {index} has norm {norm} outside the unit sphere")]
    NotPreprocessed { index: usize, norm: f64 },

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: unsupported feature: {msg}")]
    Unsupported {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

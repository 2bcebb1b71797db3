use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("parameter `{0}` is already registered")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("no gradient for parameter `{0}` in the update subset")]
    MissingGrad(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("overlapping segments at token {0}")]
    OverlappingSegments(usize),

    #[error("invalid segment {start}..={end} for length {len}")]
    InvalidSegment { start: usize, end: usize, len: usize },

    #[error("segment {0}..={1} has no sentiment")]
    MissingSentiment(usize, usize),

    #[error("sentence {0} in the labeled half has no gold tags")]
    Unlabeled(usize),

    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),

    #[error("non-finite value in {what} (first bad node #{node}: {op})")]
    NonFinite {
        what: String,
        node: usize,
        op: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown model mode `{0}`")]
    UnknownMode(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
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

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

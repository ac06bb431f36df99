use std::path::PathBuf;

use crate::net::Model;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),

    #[error("backward seed must be a scalar, node has shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("hyperplane a·δ = {b} has no solution: a is the zero vector")]
    Infeasible { b: f64 },

    #[error("no decision boundary within the search window")]
    NoBoundaryInWindow,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite gradient at step {step} in parameter `{param}`")]
    NonFiniteGradient { step: u64, param: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged {
        step: u64,
        detail: String,
        last_good: Option<Box<Model>>,
    },

    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },

    #[error("sample count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}")]
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

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

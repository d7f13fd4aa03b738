use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid cell config: {0}")]
    InvalidConfig(String),

    #[error("transmission level {index} out of range 0..={max}")]
    LevelOutOfRange { index: usize, max: usize },

    #[error("weight {0} outside [-1, 1]")]
    Domain(f64),

    #[error("invalid level pair ({pos}, {neg}): {reason}")]
    InvalidEncoding { pos: i64, neg: i64, reason: &'static str },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("block group {0} is empty")]
    EmptyGroup(usize),

    #[error("cost matrix must be square and non-empty, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },

    #[error("cost matrix entry ({row}, {col}) is negative")]
    NegativeCost { row: usize, col: usize },

    #[error("block group is not sorted ascending at cell ({row}, {col})")]
    UnsortedGroup { row: usize, col: usize },

    #[error("schedule has no per-cell permutations")]
    MissingPermutations,

    #[error("schedule already carries {0}")]
    AlreadyTransformed(&'static str),

    #[error("target ({pos}, {neg}) exceeds the reprogrammable wires of the cell")]
    Unreachable { pos: i64, neg: i64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("layer `{layer}`: data file {path} holds {actual} bytes, expected {expected}")]
    LengthMismatch {
        layer: String,
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("layer `{layer}`: unknown kind `{kind}` (expected \"dense\" or \"conv\")")]
    UnknownKind { layer: String, kind: String },

    #[error("layer `{layer}`: {reason}")]
    BadLayer { layer: String, reason: String },

    #[error("layer `{layer}`: non-finite value at index {index}")]
    NonFiniteWeight { layer: String, index: usize },

    #[error("duplicate layer name `{0}`")]
    DuplicateLayer(String),

    #[error("aging profile: {0}")]
    BadProfile(String),

    #[error("training diverged at epoch {epoch} (lambda = {lambda})")]
    Diverged { epoch: usize, lambda: f64 },
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bag: {0}")]
    InvalidBag(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("zero-norm row {row} in {context}; cosine similarity is undefined")]
    ZeroNorm { context: &'static str, row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("top-k pool size {k} exceeds block size {available}")]
    TopKTooLarge { k: usize, available: usize },

    #[error("neighbour count {k} out of range for {nodes} nodes")]
    KnnRange { k: usize, nodes: usize },

    #[error("label {label} out of range for {classes} categories")]
    LabelRange { label: usize, classes: usize },

    #[error("token sequence: {0}")]
    Tokens(String),

    #[error("description bank: {0}")]
    Bank(String),

    #[error("template bank: {0}")]
    Templates(String),

    #[error("embedding cache: {0}")]
    Cache(String),

    #[error("lookup failed: no rows for bag `{bag_id}` at scale {scale}")]
    MissingRows { bag_id: String, scale: String },

    #[error("category {category} has {available} bags, {requested} requested")]
    ShotShortfall {
        category: usize,
        available: usize,
        requested: usize,
    },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step} (bag `{bag_id}`)")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        bag_id: String,
    },

    #[error("unknown ablation toggle `{0}`")]
    UnknownToggle(String),

    #[error("synthetic spec infeasible: {0}")]
    InfeasibleSpec(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("image encoding: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

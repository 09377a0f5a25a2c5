use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown box format tag `{0}`")]
    UnknownFormat(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("embedding dimension must be even, got {0}")]
    OddDimension(usize),

    #[error("category index {index} out of range for {count} categories")]
    CategoryOutOfRange { index: usize, count: usize },

    #[error("width mismatch: expected {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },

    #[error("input {height}x{width} is not divisible by {stride}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        stride: usize,
    },

    #[error("sparse mixture needs at least 2 experts, got {0}")]
    TooFewExperts(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset integrity: {0}")]
    Dataset(String),

    #[error("split with fraction {fraction} leaves the {side} side empty")]
    EmptySplit { fraction: f64, side: &'static str },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("output directory {0} is locked by another run; delete {0}/.lock if none is active")]
    Locked(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("report plot: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

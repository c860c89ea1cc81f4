use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in block `{block}` ({count} of {len} entries; first at index {first})")]
    NonFiniteGradient {
        block: String,
        count: usize,
        len: usize,
        first: usize,
    },

    #[error("training diverged in stage {stage} at iteration {iteration}: loss = {loss}")]
    Diverged { stage: String, iteration: usize, loss: f64 },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported labeling pattern {0} (expected 5, 29 or 68)")]
    UnsupportedPattern(usize),

    #[error("degenerate face: {0}")]
    Degenerate(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("unknown block `{0}`")]
    UnknownBlock(String),

    #[error("model format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("dataset error in {}: {msg}", path.display())]
    Dataset { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn dataset(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }
}

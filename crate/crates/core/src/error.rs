use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum GilaError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("synchronization error: audio has {audio} frames, video has {video}")]
    Sync { audio: usize, video: usize },
    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("corpus file error: {0}")]
    Corpus(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GilaError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        GilaError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        GilaError::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        GilaError::Numeric(msg.into())
    }
}

pub type Result<T, E = GilaError> = std::result::Result<T, E>;

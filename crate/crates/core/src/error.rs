use thiserror::Error;

pub type Result<T, E = PirError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PirError {
    #[error("shape error at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("graph input `{0}` is not bound")]
    MissingInput(String),

    #[error("parameter `{0}` is missing from the parameter store")]
    MissingParam(String),

    #[error("graph has no output named `{0}`")]
    UnknownOutput(String),

    #[error("backward called before evaluate")]
    BackwardBeforeForward,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("missing ids: {0:?}")]
    MissingIds(Vec<usize>),

    #[error("unknown ids: {0:?}")]
    UnknownIds(Vec<usize>),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PirError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PirError::InvalidArgument(msg.into())
    }
}

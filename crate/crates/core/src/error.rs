use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid stream sample: {0}")]
    Sample(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("stream cache out of sync: {0}")]
    Cache(String),

    #[error("routing logic error: {0}")]
    Routing(String),

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("cache budget of {budget} bytes is smaller than one frame ({frame_bytes} bytes)")]
    BudgetTooSmall { budget: u64, frame_bytes: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

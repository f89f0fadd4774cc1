use thiserror::Error;

/// Errors produced anywhere in the core crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph was already consumed by a backward pass")]
    GraphSpent,

    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),

    #[error("invalid index set: {0}")]
    InvalidIndices(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("prompt needs {needed} tokens but the text length is {available}")]
    PromptTooLong { needed: usize, available: usize },

    #[error("unknown instruction id {0}")]
    UnknownInstruction(usize),

    #[error("instruction index {index} out of range for a prompt with {count} instructions")]
    InstructionOutOfRange { index: usize, count: usize },

    #[error("adapter rank {rank} exceeds the smallest projection dimension {limit}")]
    RankTooLarge { rank: usize, limit: usize },

    #[error("slider scale {value} rejected: {reason}")]
    InvalidScale { value: f64, reason: &'static str },

    #[error("world capacity exceeded: {0}")]
    WorldCapacity(String),

    #[error("training diverged at step {step} (last finite step: {last_good:?})")]
    Diverged {
        step: usize,
        last_good: Option<usize>,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

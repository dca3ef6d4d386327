use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("shape mismatch: {context} (lhs {lhs:?}, rhs {rhs:?})")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("fully masked row {row}: every position is invisible")]
    FullyMaskedRow { row: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unregistered op: {0}")]
    UnregisteredOp(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("sequence too dense to corrupt: need {needed} gaps, have {available}")]
    TooDenseToCorrupt { needed: usize, available: usize },

    #[error("batch/architecture mismatch: {0}")]
    BatchArchMismatch(String),

    #[error("target id {id} out of vocab (size {vocab})")]
    TargetOutOfVocab { id: u32, vocab: usize },

    #[error("no parameter mapping from {from} to {to}")]
    NoParameterMapping { from: String, to: String },

    #[error("stage lineage mismatch: expected {expected}, found {found}")]
    WrongLineage { expected: String, found: String },

    #[error("non-finite loss at step {step}: {what}")]
    NonFiniteLoss { step: usize, what: String },

    #[error("render too long: {len} tokens exceeds seq_len {seq_len}")]
    RenderTooLong { len: usize, seq_len: usize },

    #[error("too many skipped examples: {skipped} of {total}")]
    TooManySkipped { skipped: usize, total: usize },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum XmError {
    #[error("{primitive}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        primitive: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} out of vocabulary range (size {vocab_size})")]
    VocabOutOfRange { id: u32, vocab_size: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("backward already ran on this tensor; build a fresh graph to accumulate")]
    BackwardTwice,

    #[error("parameter '{0}' has no gradient; silent skips are forbidden")]
    MissingGradient(String),

    #[error("attention row {row} admits zero attendable keys")]
    EmptyMaskRow { row: usize },

    #[error("decoder state does not belong to this model instance")]
    StateMismatch,

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (loss is not finite)")]
    Diverged { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl XmError {
    /// Classify for the CLI: validation problems exit 1, runtime failures exit 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            XmError::Config(_) | XmError::InvalidArgument(_) | XmError::VocabOutOfRange { .. }
        )
    }
}

pub type XmResult<T> = Result<T, XmError>;

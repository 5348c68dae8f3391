use thiserror::Error;

pub type Result<T> = std::result::Result<T, EmpoError>;

#[derive(Debug, Error)]
pub enum EmpoError {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Token ids, masks or sequence lengths are out of range.
    #[error("invalid input: {0}")]
    Input(String),

    /// A rejection strategy cannot be applied to the given sample.
    #[error("strategy error: {0}")]
    Strategy(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset or record schema mismatch.
    #[error("load error: {0}")]
    Load(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

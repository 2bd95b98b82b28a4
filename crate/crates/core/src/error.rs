use thiserror::Error;

/// Errors raised by the encoder stack, analysis tools and harness.
#[derive(Debug, Error)]
pub enum PdsError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("item {index} has length {length} and would compress to length 0")]
    ItemTooShort { index: usize, length: usize },

    #[error("degenerate batch: {valid} valid positions, batch norm needs at least 2")]
    DegenerateBatch { valid: usize },

    #[error("attention row {row} has no valid key positions")]
    EmptyAttention { row: usize },

    #[error("similarity undefined for a sequence of {0} positions")]
    UndefinedSimilarity(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PdsError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PdsError::Config(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            PdsError::Numerical(_) | PdsError::Diverged { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PdsError>;

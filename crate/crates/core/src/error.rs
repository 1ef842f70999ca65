use thiserror::Error;

#[derive(Debug, Error)]
pub enum WinqError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch at {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("training diverged at step {step}: loss {loss} exceeded {threshold} for {window} consecutive steps")]
    Diverged {
        step: usize,
        loss: f64,
        threshold: f64,
        window: usize,
    },

    #[error("operator too large for dense oracle: {dim} parameters (limit {limit})")]
    TooLarge { dim: usize, limit: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt or incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WinqError>;

use thiserror::Error;

/// Errors surfaced by tensor ops, losses, data generation, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: domain error: {reason}")]
    Domain { op: &'static str, reason: String },

    #[error("gradcheck: non-finite loss while probing parameter `{param}` entry {index}")]
    NonFiniteProbe { param: String, index: usize },

    #[error("backward: root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("backward: gradients already computed for this tape; build a fresh tape instead")]
    BackwardTwice,

    #[error("token id {id} out of range for dictionary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds decoder maximum {max}")]
    OverLength { len: usize, max: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: non-finite loss ({breakdown})")]
    NonFiniteLoss { step: usize, breakdown: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Domain {
            op,
            reason: reason.into(),
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },

    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },

    #[error("{op}: non-finite or out-of-domain input ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("grad: output must hold a single value, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("finite_diff: {0}")]
    FiniteDiff(String),
}

use sadag_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SadagError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    /// A quantity whose range or spread collapsed (constant weights, zero
    /// variance batch, zero gradient direction).
    #[error("degenerate {what}: {detail}")]
    Degenerate { what: &'static str, detail: String },

    #[error("non-finite loss during {stage} at iteration {iteration}")]
    NonFinite { stage: &'static str, iteration: usize },

    #[error("{stage} diverged at step {step} (loss {loss:e} vs initial {initial:e}); recent losses {trace:?}")]
    Diverged { stage: &'static str, step: usize, loss: f64, initial: f64, trace: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, SadagError>;

pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> SadagError {
    SadagError::Invalid { what, detail: detail.into() }
}

pub(crate) fn degenerate(what: &'static str, detail: impl Into<String>) -> SadagError {
    SadagError::Degenerate { what, detail: detail.into() }
}

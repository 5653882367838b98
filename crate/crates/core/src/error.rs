use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid value for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{0}")]
    Invalid(String),

    #[error("token id {id} at index {index} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, index: usize, vocab: usize },

    #[error("non-finite loss at step {step} (global parameter norm {param_norm:.6e})")]
    NonFiniteLoss { step: usize, param_norm: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

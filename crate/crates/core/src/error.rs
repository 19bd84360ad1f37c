use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid configuration `{key}`: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

impl ModelError {
    /// Flattens into a [`TensorError`] for APIs that only speak tensor errors
    /// (the gradient checker's closure type).
    pub fn into_tensor(self) -> TensorError {
        match self {
            ModelError::Tensor(e) => e,
            other => TensorError::InvalidArgument {
                op: "model",
                reason: other.to_string(),
            },
        }
    }
}

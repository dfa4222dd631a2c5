use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid step: {0}")]
    Step(String),
    #[error("ensemble error: {0}")]
    Ensemble(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("unsupported capability: {0}")]
    Capability(String),
    #[error("training diverged at iteration {iter}: {reason}")]
    Training { iter: usize, reason: String },
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

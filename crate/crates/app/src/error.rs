use thiserror::Error;

/// Failure classes shared by the command line and the service.
#[derive(Debug, Error)]
pub enum AppError {
    /// Malformed arguments or request.
    #[error("{0}")]
    Usage(String),
    /// An input file or payload could not be read or decoded.
    #[error("{0}")]
    Input(String),
    /// Configuration or guidance failed validation.
    #[error("{0}")]
    Invalid(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Input(_) => 3,
            AppError::Invalid(_) => 4,
            AppError::Internal(_) => 5,
        }
    }
}

impl From<genmatte_core::Error> for AppError {
    fn from(e: genmatte_core::Error) -> Self {
        use genmatte_core::Error as E;
        match e {
            E::Config(_) | E::Validation(_) | E::Capability(_) | E::Shape(_) => AppError::Invalid(e.to_string()),
            _ => AppError::Internal(e.to_string()),
        }
    }
}

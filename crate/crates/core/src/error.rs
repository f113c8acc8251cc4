use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("laplace relaxation did not converge after {iterations} iterations (max update {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("orientation undefined: no gray-matter pixel with nonzero gradient in region")]
    OrientationUndefined,

    #[error("non-finite loss at iteration {iteration} (lr {lr})")]
    NonFiniteLoss { iteration: usize, lr: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;

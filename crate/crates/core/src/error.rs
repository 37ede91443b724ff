use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The linear system is numerically singular under the configured
    /// relative threshold.
    #[error("singular system: sigma_min/sigma_max = {ratio:e}")]
    SingularSystem { ratio: f64 },

    #[error("matrix is numerically singular: sigma_min/sigma_max = {ratio:e}")]
    SingularInput { ratio: f64 },

    #[error("extreme singular values are not simple (gap {gap:e})")]
    DegenerateSpectrum { gap: f64 },

    #[error("matrix is already singular")]
    AlreadySingular,

    #[error("zero matrix has no condition number to clamp")]
    ZeroMatrix,

    #[error("canonical solution of the clamped system is zero")]
    DegenerateRhs,

    #[error("backward pass requested after a non-finite forward pass")]
    NonFiniteForward,

    /// Iterative solver hit its budget. Carries the best iterate seen.
    #[error("not converged after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

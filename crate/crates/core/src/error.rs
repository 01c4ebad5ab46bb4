use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("side peaks not resolvable (prominence {prominence:.4} <= threshold {threshold:.4})")]
    NotResolvable { prominence: f64, threshold: f64 },

    #[error("measured shift {shift_px:.3} px exceeds model range (max {max_px:.3} px)")]
    OutOfRange { shift_px: f64, max_px: f64 },

    #[error("spectrum is not anisotropic enough to read an orientation (score {score:.4})")]
    Isotropic { score: f64 },

    #[error("calibration did not converge after {iterations} iterations (loss {loss:.6e}, |grad| {grad_norm:.3e})")]
    Convergence {
        iterations: usize,
        loss: f64,
        grad_norm: f64,
        trace: Vec<f64>,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss (learning rate {lr:e} too high?)")]
    Diverged { epoch: usize, lr: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("architecture fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    Fingerprint { expected: u64, found: u64 },

    #[error("missing file referenced by manifest: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("split mismatch: {0}")]
    SplitMismatch(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors the CLI maps to the "configuration error" exit code.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }

    /// True for errors the CLI maps to the "convergence/validity failure" exit code.
    pub fn is_validity(&self) -> bool {
        matches!(
            self,
            Error::Convergence { .. }
                | Error::Diverged { .. }
                | Error::NotResolvable { .. }
                | Error::OutOfRange { .. }
                | Error::Isotropic { .. }
                | Error::Fingerprint { .. }
                | Error::SplitMismatch(_)
        )
    }
}

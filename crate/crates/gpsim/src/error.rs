//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, factorization, sampling and the
/// experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// The jitter ladder was exhausted without producing a valid factor.
    #[error("matrix of dim {dim} is not positive definite (max jitter tried: {max_jitter:.3e})")]
    NotPositiveDefinite { dim: usize, max_jitter: f64 },

    /// A simulated state left the finite range (divergence guard).
    #[error("non-finite or diverged state at trajectory {trajectory}, step {step} (|x| > {limit:.1e})")]
    NonFinite {
        trajectory: usize,
        step: usize,
        limit: f64,
    },

    /// Too few usable eigenvalues for the requested basis size.
    #[error("degenerate spectrum: requested {requested} basis functions, only {achievable} eigenvalues above threshold")]
    DegenerateSpectrum { requested: usize, achievable: usize },

    /// The operation does not apply to batches produced by this method.
    #[error("operation not supported for {what}")]
    UnsupportedMethod { what: String },

    #[error("insufficient samples: need at least {required}, got {got}")]
    InsufficientSamples { required: usize, got: usize },

    /// Config file rejected, with file/line/field diagnostics.
    #[error("invalid config ({location}): {message}")]
    ConfigInvalid { location: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for config errors, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid { .. } | Error::InvalidArgument(_) | Error::Io(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A scale/covariance matrix could not be factorized even after the
    /// escalating jitter policy.
    #[error("scale matrix is singular or not positive definite{}", curve_suffix(.curve))]
    SingularScale { curve: Option<usize> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid index set: {reason}")]
    Index { reason: String },

    #[error("matrix is rank deficient: rank {rank} < {rows} rows")]
    RankDeficient { rank: usize, rows: usize },

    #[error("invalid parameter: {reason}")]
    InvalidParameter { reason: String },

    #[error("nu out of domain: {nu} (finite nu must exceed 1)")]
    NuOutOfDomain { nu: f64 },

    #[error("invalid options: {reason}")]
    InvalidOptions { reason: String },

    #[error("negative Hessian is not positive definite; standard errors unavailable")]
    HessianNotPd,

    #[error("numerical error: {reason}")]
    Numerical { reason: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

fn curve_suffix(curve: &Option<usize>) -> String {
    match curve {
        Some(i) => format!(" (curve {i})"),
        None => String::new(),
    }
}

impl Error {
    /// Attach a curve index to a `SingularScale` raised inside per-curve code.
    pub(crate) fn with_curve(self, curve: usize) -> Self {
        match self {
            Error::SingularScale { curve: None } => Error::SingularScale { curve: Some(curve) },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

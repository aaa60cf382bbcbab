use std::fmt;

use thiserror::Error;

/// First invariant a Gaussian mixture fails, as reported by [`crate::gm::GaussianMixture::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    ShapeMismatch { component: usize, detail: String },
    NonFinite { component: usize },
    NegativeWeight { component: usize, value: f64 },
    SimplexSum { sum: f64 },
    Asymmetric { component: usize, max_deviation: f64 },
    NotPositiveDefinite { component: usize, min_eigenvalue: f64, max_eigenvalue: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "mixture has no components"),
            Violation::ShapeMismatch { component, detail } => {
                write!(f, "component {component}: {detail}")
            }
            Violation::NonFinite { component } => {
                write!(f, "component {component} has non-finite parameters")
            }
            Violation::NegativeWeight { component, value } => {
                write!(f, "weight {component} is negative ({value})")
            }
            Violation::SimplexSum { sum } => write!(f, "weights sum to {sum}, not 1"),
            Violation::Asymmetric { component, max_deviation } => write!(
                f,
                "covariance {component} is not symmetric (max |S - S^T| = {max_deviation:e})"
            ),
            Violation::NotPositiveDefinite { component, min_eigenvalue, max_eigenvalue } => write!(
                f,
                "covariance {component} is not positive definite (eigenvalues in [{min_eigenvalue:e}, {max_eigenvalue:e}])"
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum CasError {
    #[error("invalid Gaussian mixture: {0}")]
    Invalid(Violation),

    #[error("shape mismatch: {0}")]
    Mismatch(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("unknown day {day} (memory holds days 1..={current})")]
    UnknownDay { day: usize, current: usize },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CasError {
    /// Whether the error comes from the numerics rather than from user input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CasError::Quadrature(_) | CasError::NonFinite(_) | CasError::DegenerateFit(_)
        )
    }
}

impl From<Violation> for CasError {
    fn from(v: Violation) -> Self {
        CasError::Invalid(v)
    }
}

pub type Result<T, E = CasError> = std::result::Result<T, E>;

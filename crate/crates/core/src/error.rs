use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A closed-form evaluation overflowed or produced NaN.
    #[error("domain error: {0}")]
    Domain(String),

    /// Model parameters violate a structural invariant (indefinite covariance, negative rate, ...).
    #[error("invalid model: {0}")]
    ModelInvariant(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Hypothesis H1 cannot be satisfied: non-positive short spread or recovery at or above one.
    #[error("H1 infeasible for rating {rating} at t={time}: {reason}")]
    H1Infeasible {
        rating: usize,
        time: f64,
        reason: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Scenario parse or validation error; `location` is a file:line or a field path.
    #[error("{location}: {message}")]
    Scenario { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn scenario(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Scenario {
            location: location.into(),
            message: message.into(),
        }
    }
}

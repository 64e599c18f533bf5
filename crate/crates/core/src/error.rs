//! Crate-wide error type.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    /// Input failed a structural or domain check.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A vector or table had the wrong length for its context.
    #[error("{context}: expected length {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// An iterative routine ran out of iterations.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Share inversion failed for a specific market.
    #[error("inversion failed for market {market_id}: {source}")]
    Inversion {
        market_id: String,
        #[source]
        source: Box<Error>,
    },

    /// A signal cannot be conditioned on because the prior assigns it zero probability.
    #[error("signal {signal:?} has probability zero under the prior")]
    ZeroProbabilitySignal { signal: String },

    /// Arithmetic produced a non-finite or otherwise unusable value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A covariance or second-moment matrix is rank deficient.
    #[error("rank-deficient matrix: {0}")]
    RankDeficient(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

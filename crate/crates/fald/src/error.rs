//! Crate-wide error type.

/// Errors produced by potential models, samplers and analytics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Vector/matrix dimensions do not agree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A value violates an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration field is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A numerical routine failed to converge or a decomposition broke down.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A chain left the admissible region (non-finite or exploding parameter).
    #[error("chain diverged at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    /// The budget problem admits no solution.
    #[error("infeasible budget problem: {0}")]
    Infeasible(String),

    /// A file could not be read, written or parsed.
    #[error("io failure: {0}")]
    Io(String),
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Io(err.to_string())
    }
}

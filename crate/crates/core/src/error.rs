use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("negative probability mass {value} at state {state}")]
    NegativeMass { state: usize, value: f64 },
    #[error("belief has zero total mass")]
    ZeroMass,
    #[error("belief dimension {0} is below the minimum of 2")]
    DimensionTooSmall(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("mixing weight {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("grid would contain {count} points, above the cap of {cap}")]
    SizeOverflow { count: u128, cap: usize },
    #[error("{solver} did not converge within {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("portfolio has a zero holding at state {0}; the inverse map needs an interior portfolio")]
    BoundaryPortfolio(usize),
    #[error("state {0} has zero probability under every agent's belief")]
    DeadState(usize),
    #[error("the geometric median rule requires an odd number of agents, got {0}")]
    EvenAgentsForMedian(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

use thiserror::Error;

/// Errors surfaced by the sampling, adaptation, model, and engine layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Weights cannot be normalized, or too few particles carry mass.
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Resampling asked for more supported particles than exist.
    #[error("insufficient support: requested {requested}, only {available} particles carry positive weight")]
    InsufficientSupport { requested: usize, available: usize },

    /// A mixture component lost all responsibility mass during fitting.
    #[error("component starvation: {0}")]
    ComponentStarvation(String),

    /// Replenishment could not produce a usable sample.
    #[error("replenishment failed: {0}")]
    ReplenishFailed(String),

    /// The tempering ladder ran out of steps before reaching the target.
    #[error("annealing failed: {0}")]
    AnnealFailed(String),

    /// Two observation locations coincide exactly.
    #[error("duplicate location: rows {0} and {1} coincide")]
    DuplicateLocation(usize, usize),

    /// A linear-algebra or floating-point operation failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A configuration value violates an invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// Serialization or deserialization of a checkpoint/proposal failed.
    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

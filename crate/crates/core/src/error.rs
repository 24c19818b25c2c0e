use thiserror::Error;

/// Axis of a kernel matrix, used when reporting degenerate rows or columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::Row => f.write_str("row"),
            Axis::Column => f.write_str("column"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("Gibbs kernel {axis} {index} is numerically zero (epsilon too small for the cost scale)")]
    DegenerateKernel { axis: Axis, index: usize },

    #[error("kernel density weights underflow at particle {index}")]
    DegenerateKde { index: usize },

    #[error("score function not available for {0}")]
    UnsupportedScore(String),

    #[error("unsupported instance: {0}")]
    UnsupportedInstance(String),

    #[error("non-finite particle position after step {step}")]
    Divergence { step: usize },

    #[error("non-finite training loss at step {step} (max |velocity| = {max_velocity})")]
    NonFiniteLoss { step: usize, max_velocity: f64 },

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("catalog: {0}")]
    Catalog(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e @ Error::Divergence { .. } => e,
            e @ Error::NonFiniteLoss { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// True when the error stems from numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Divergence { .. }
            | Error::NonFiniteLoss { .. }
            | Error::DegenerateKernel { .. }
            | Error::DegenerateKde { .. } => true,
            Error::AtStep { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

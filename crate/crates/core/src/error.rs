use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, range, configuration).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Every term handed to a log-sum-exp reduction was `-inf`.
    #[error("degenerate mixture: every log-term is -inf")]
    DegenerateMixture,

    /// A log-density or gradient came out non-finite.
    #[error("numeric failure at component {component}: {detail}")]
    Numeric { component: usize, detail: String },

    /// An exact oracle was asked to work beyond the scale it supports.
    #[error("oracle scale exceeded: {0}")]
    OracleScale(String),

    /// A refinement-checked integral did not settle.
    #[error("oracle did not converge: {0}")]
    OracleConvergence(String),

    /// Training stopped because an update produced a non-finite value.
    #[error("iteration {iteration}: {source}")]
    AtIteration { iteration: usize, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

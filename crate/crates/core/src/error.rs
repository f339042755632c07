use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DuoError>;

#[derive(Debug, Error)]
pub enum DuoError {
    /// A caller broke a documented precondition (shape, range, arity).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singular matrix: pivot magnitude {pivot:e} below threshold")]
    Singular { pivot: f64 },

    #[error("non-finite function value while probing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("degenerate probability p[{index}] = {value:e} at or below the floor")]
    DegenerateProbability { index: usize, value: f64 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("tensor file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DuoError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        DuoError::Contract(msg.into())
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the failure-discovery pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("budget exhausted: requested {requested} true-system queries, {remaining} remaining of {total}")]
    BudgetExhausted { requested: usize, remaining: usize, total: usize },

    #[error("Riccati recursion did not converge (residual {residual:e} after {iterations} iterations)")]
    RiccatiNonConvergence { residual: f64, iterations: usize },

    #[error("flow training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("kernel matrix is not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("not enough points: need {needed}, have {available}")]
    NotEnoughPoints { needed: usize, available: usize },

    #[error("empty coverage set: no chain sample passed coverage > {c_th} and the safe-class check; lower the coverage threshold or enlarge the projection radius")]
    EmptyCoverageSet { c_th: f64 },

    #[error("predicted safe region is empty at threshold {threshold}")]
    EmptySafeRegion { threshold: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` requires `{required}` to be completed first")]
    Ordering { stage: String, required: String },

    #[error("artifact {path} is missing or stale; re-run `{required}`")]
    StaleArtifact { path: PathBuf, required: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

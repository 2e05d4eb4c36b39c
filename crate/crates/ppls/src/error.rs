//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PplsError {
    #[error("column {index} degenerate during orthonormalization (projected norm {norm:.3e})")]
    DegenerateColumns { index: usize, norm: f64 },

    #[error("matrix not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(
        "components {i} and {j} have nearly equal sigma_t^2 * b (relative gap {gap:.3e})"
    )]
    NearDegenerateComponents { i: usize, j: usize, gap: f64 },

    #[error("overlap fraction requires p = q, got p = {p} and q = {q}")]
    NonSquareCrossBlock { p: usize, q: usize },

    #[error("{0} block is identically zero")]
    ZeroVariance(&'static str),

    #[error("cross-covariance has {found} singular values above threshold, need {needed}")]
    RankDeficient { found: usize, needed: usize },

    #[error("{parameter} update produced non-positive value {value:.3e} at iteration {iteration}")]
    NegativeVariance {
        parameter: &'static str,
        value: f64,
        iteration: usize,
    },

    #[error("log-likelihood became non-finite at iteration {0}")]
    NonFiniteLikelihood(usize),

    #[error("component index {k} out of range 1..={r}")]
    ComponentOutOfRange { k: usize, r: usize },

    #[error("{failed} of {total} bootstrap replicates failed (limit {limit})")]
    TooManyFailedReplicates {
        failed: usize,
        total: usize,
        limit: usize,
    },

    #[error("{failed} of {total} scenario replicates failed (limit {limit})")]
    TooManyFailedScenarioReplicates {
        failed: usize,
        total: usize,
        limit: usize,
    },
}

pub type Result<T> = std::result::Result<T, PplsError>;

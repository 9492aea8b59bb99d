//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for all engines.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("generator is not unimodular (det = {det}) at index {index}")]
    NotUnimodular { index: usize, det: String },

    #[error("invalid generator system: {0}")]
    InvalidSystem(String),

    #[error("coset labels are inconsistent: {0}")]
    InconsistentLabels(String),

    #[error("coset labels are required for this operation")]
    MissingLabels,

    #[error("precision budget exhausted: need {needed} guard bits, have {have}")]
    BudgetExhausted { needed: u32, have: u32 },

    #[error("atom budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("eigenvalue clusters are ambiguous after {retries} retries (min gap {gap:.3e})")]
    AmbiguousClusters { retries: usize, gap: f64 },

    #[error("tolerance exceeded: {0}")]
    ToleranceExceeded(String),

    #[error("block exponent grouping is ambiguous: {0}")]
    GroupingAmbiguous(String),

    #[error("hyperplane is degenerate: functional vanishes on every basis direction")]
    DegenerateHyperplane,

    #[error("hyperplane does not contain the compact directions")]
    InvalidHyperplane,

    #[error("Fourier hypothesis failed: |coefficient| = {measured:.6} < t = {threshold}")]
    HypothesisFailed { measured: f64, threshold: f64 },

    #[error("no generator tuple satisfied the intersection condition within the sampling budget")]
    NoTupleFound,

    #[error("decay fit impossible: {0}")]
    InsufficientDecade(String),

    #[error("exact weight arithmetic overflowed its compact representation: {0}")]
    WeightOverflow(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

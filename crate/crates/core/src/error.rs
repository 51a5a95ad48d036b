//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by validation, numerical routines and file I/O.
#[derive(Debug, Error)]
pub enum CalibError {
    /// Structural mismatch between inputs (wrong lengths, incompatible shapes).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input values violate a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The autoregressive matrix is not stable (spectral radius >= 1).
    #[error("non-stationary transition matrix: spectral radius {rho:.6} >= 1")]
    NonStationary { rho: f64 },

    /// A covariance that must be positive (semi-)definite is not.
    #[error("covariance not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// An innovation covariance could not be factorized during filtering.
    #[error("ill-conditioned innovation covariance at period {period}: {detail}")]
    Conditioning { period: usize, detail: String },

    /// A curvature block required to be negative definite was not.
    #[error("Newton step rejected at period {period}: curvature block {block} not negative definite")]
    StepRejection { period: usize, block: usize },

    /// An iterative scheme exhausted its iteration budget.
    #[error("no convergence after {iterations} iterations (last step norm {step_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        step_norm: f64,
        /// Sup-norm of the posterior gradient at the last iterate.
        grad_norm: f64,
    },

    /// All particle weights vanished in the same period.
    #[error("particle weights collapsed to zero at period {period}")]
    WeightCollapse { period: usize },

    /// The optimizer failed to locate a usable optimum.
    #[error("optimization failed: {0}")]
    Optimization(String),

    /// The requested operation is not defined for the given model family.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Too many likelihood-surface grid points failed to evaluate.
    #[error("likelihood surface too sparse: {evaluated} of {total} grid points evaluated (need {required})")]
    SparseSurface {
        evaluated: usize,
        total: usize,
        required: usize,
    },

    /// Malformed record in a delimited input file.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("Cholesky factorization of {what} failed{}", row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    FactorizationFailed { what: &'static str, row: Option<usize> },

    #[error("conjugate gradient breakdown at iteration {iteration}: {quantity} = {value:e}")]
    CgBreakdown {
        iteration: usize,
        quantity: &'static str,
        value: f64,
    },

    #[error("non-positive eigenvalue {value:e} in tridiagonal quadrature (index {index})")]
    IndefiniteQuadrature { index: usize, value: f64 },

    #[error("conditional variance non-positive at row {row}: {value:e}")]
    NonPositiveConditionalVariance { row: usize, value: f64 },

    #[error("too many clamped conditional variances: {clamped} of {total} rows")]
    DegenerateResidualProcess { clamped: usize, total: usize },

    #[error("Newton mode finding did not converge after {iterations} iterations (increment {increment:e})")]
    NewtonNoConvergence { iterations: usize, increment: f64 },

    #[error("line search failed: {0}")]
    LineSearchFailed(&'static str),

    #[error("control variate requires at least 2 probe vectors, got {0}")]
    TooFewProbes(usize),

    #[error("degenerate residual variance at point {index}: {value:e}")]
    DegenerateMetric { index: usize, value: f64 },

    #[error("optimizer failed: {0}")]
    OptimizerFailed(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

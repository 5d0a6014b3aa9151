use alloc::string::String;

/// Failures reported by the solvers, estimators and asymptotic formulas.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("probability {p} at (a={a}, x={x}) is not strictly inside (0, 1)")]
    NotInterior { a: usize, x: usize, p: f64 },
    #[error("invalid transition kernel: {0}")]
    InvalidKernel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{what} is singular or ill-conditioned (condition number {condition:e})")]
    Singular { what: &'static str, condition: f64 },
    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("Richardson check failed: relative discrepancy {discrepancy:e} exceeds 1%")]
    Richardson { discrepancy: f64 },
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
}

pub type Result<T> = core::result::Result<T, Error>;

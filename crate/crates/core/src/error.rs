use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph is disconnected (second Laplacian eigenvalue {rho2:.3e} is not negative)")]
    DisconnectedGraph { rho2: f64 },

    #[error("mixing norm ||I + L - 11'/m|| = {norm:.6} is not below 1")]
    SpectralNormViolation { norm: f64 },

    #[error("malformed edge: {0}")]
    MalformedEdge(String),

    #[error("generation failed after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },

    #[error("sequence {family} is singular at k = 0")]
    SingularAtZero { family: String },

    #[error("invalid sequence family: {0}")]
    InvalidFamily(String),

    #[error("stepsize {name} is not nonincreasing, so a cap check at k = 0 does not bound later iterations")]
    NonMonotoneFamily { name: &'static str },

    #[error("sum of gamma/nu diverges (tail exponent {exponent:.3})")]
    DivergentRatio { exponent: f64 },

    #[error("tail tolerance {tolerance:.1e} not reached (interval width {width:.3e})")]
    TailToleranceUnreachable { tolerance: f64, width: f64 },

    #[error("privacy accountant expected iteration {expected}, got {got}")]
    OutOfOrderAccumulation { expected: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no convergence after {iterations} iterations (best residual {best_residual:.3e})")]
    NoConvergence { iterations: usize, best_residual: f64 },

    #[error("numerical failure at iteration {iteration}: {what}")]
    NumericalFailure { iteration: usize, what: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

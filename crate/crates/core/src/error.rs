use thiserror::Error;

/// Errors surfaced by the samplers, models, and diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("gradient too close to zero for a contour reflection")]
    DegenerateGradient,
    #[error("thinning bound violated at t={t}: realized rate {realized} exceeds bound {bound}")]
    BoundViolation { realized: f64, bound: f64, t: f64 },
    #[error("optimizer did not converge within {max_iter} steps (|grad| = {grad_norm:e})")]
    NonConvergence { max_iter: usize, grad_norm: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("event log does not carry the data needed: {0}")]
    MissingLogData(&'static str),
    #[error("series too short: {len} points, need at least {need}")]
    SeriesTooShort { len: usize, need: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed data: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

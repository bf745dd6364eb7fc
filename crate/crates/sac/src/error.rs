use thiserror::Error;

/// Errors produced by model evaluation, integration, and control synthesis.
#[derive(Debug, Error)]
pub enum SacError {
    #[error("dimension mismatch: expected {expected}, got {got} in {context}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value encountered in {context} at t = {time}")]
    NonFinite { context: &'static str, time: f64 },

    #[error("trajectory diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("undeclared transition {from} -> {to}")]
    UndeclaredTransition { from: usize, to: usize },

    #[error("grazing impact: |D_x(phi) . f| = {value} below tolerance {tolerance}")]
    GrazingImpact { value: f64, tolerance: f64 },

    #[error("transition cap exceeded ({max} transitions): potential Zeno behavior at t = {time}")]
    Zeno { max: usize, time: f64 },

    #[error("multiple guards active within one step at t = {time}")]
    AmbiguousTransition { time: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid usage: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, SacError>;

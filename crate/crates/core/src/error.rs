use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {what} must be {rule}, got {value}")]
    Domain {
        what: &'static str,
        rule: &'static str,
        value: f64,
    },

    #[error("clock kind mismatch: expected {expected}, got {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid ensemble: {0}")]
    InvalidSpec(String),

    #[error("{what} is singular or ill-conditioned (condition number {cond:e})")]
    Singular { what: &'static str, cond: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("closed-loop spectral radius {radius} is not below one")]
    Unstable { radius: f64 },

    #[error("feedback parameter gamma={gamma} violates |1 - gamma| < 1; set the unstable override to run it anyway")]
    UnstableGain { gamma: f64 },

    #[error("config error at `{field}`: {rule}")]
    Config { field: String, rule: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            rule: rule.into(),
        }
    }

    pub(crate) fn dim(what: &'static str, expected: usize, found: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            found,
        }
    }
}

use thiserror::Error;

/// Errors raised anywhere in the solver suite.
///
/// Variants are grouped by the CLI exit code they map to: validation and
/// domain problems are caller mistakes, solver failures are numerical.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violates a documented range. `key` names the offending
    /// field (config key path or argument name).
    #[error("invalid {key}: {reason}")]
    Validation { key: String, reason: String },

    /// A point lies outside the domain of an operation.
    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },

    /// The inverse change of variables is undefined at maturity for v != 0.
    #[error("degenerate time: inverse transform at T with v = {v}")]
    DegenerateTime { v: f64 },

    /// Frictionless CRRA factor blows up inside the horizon.
    #[error("Riccati explosion at time-to-maturity {critical_tau:.6}")]
    Explosion { critical_tau: f64 },

    /// Problem/grid combination cannot be assembled.
    #[error("assembly error: {0}")]
    Assembly(String),

    /// Non-smooth Newton did not converge.
    #[error(
        "Newton failed to converge at tau = {tau:.6} after {iterations} iterations \
         (worst node {node}, residual {residual:.3e})"
    )]
    NewtonDivergence {
        tau: f64,
        iterations: usize,
        node: usize,
        residual: f64,
    },

    /// Sparse factorization failed.
    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("time level tau = {0} is not retained in this solution")]
    LevelNotRetained(f64),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn validation(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn domain(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Domain {
            op,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad input rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::Domain { .. }
                | Error::DegenerateTime { .. }
                | Error::Unsupported(_)
                | Error::Format(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

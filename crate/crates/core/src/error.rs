use thiserror::Error;

use crate::geom::Point;

pub type Result<T, E = FinslerError> = std::result::Result<T, E>;

/// Failures raised by the numerical pipeline.
///
/// Every numerical failure carries the residual it reached so callers can
/// judge how far from convergence the solver stopped.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum FinslerError {
    #[error("point ({:.6}, {:.6}) lies outside the metric domain of radius {radius}", point.x, point.y)]
    Domain { point: Point, radius: f64 },

    #[error("the zero vector has no Legendre transform")]
    ZeroVector,

    #[error("{operation} did not converge after {iterations} iterations (residual {residual:.3e}, last iterate {last_iterate:.12})")]
    NoConvergence {
        operation: &'static str,
        iterations: usize,
        residual: f64,
        last_iterate: f64,
    },

    #[error("trajectory from ({:.6}, {:.6}) did not leave the disc of radius {radius} within {steps} steps", start.x, start.y)]
    Trapped { start: Point, radius: f64, steps: usize },

    #[error("shooting from ({:.6}, {:.6}) to ({:.6}, {:.6}) failed after all restarts (residual {residual:.3e}); the metric may not be simple", from.x, from.y, to.x, to.y)]
    Shooting { from: Point, to: Point, residual: f64 },

    #[error("invalid metric: {0}")]
    InvalidMetric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for FinslerError {
    fn from(e: std::io::Error) -> Self {
        FinslerError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for FinslerError {
    fn from(e: serde_json::Error) -> Self {
        FinslerError::Format(e.to_string())
    }
}

impl FinslerError {
    /// True for errors caused by bad input rather than by a solver.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            FinslerError::InvalidMetric(_)
                | FinslerError::InvalidArgument(_)
                | FinslerError::Domain { .. }
                | FinslerError::Format(_)
                | FinslerError::Io(_)
        )
    }

    /// Residual carried by numerical failures.
    pub fn residual(&self) -> Option<f64> {
        match self {
            FinslerError::NoConvergence { residual, .. } | FinslerError::Shooting { residual, .. } => Some(*residual),
            _ => None,
        }
    }
}

use std::fmt;

/// Errors raised by the simulation and analysis routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    Quadrature(QuadratureFailure),

    #[error("error signal has no sign change on the grid")]
    NoLockPoint,

    #[error("slope calibration failed: {0}")]
    Calibration(String),

    #[error("input sampled at dt = {dt:e} s, demodulation needs dt <= {required:e} s")]
    Undersampled { dt: f64, required: f64 },

    #[error("counter configuration: {0}")]
    Counter(String),

    #[error("counter synchronization: {0}")]
    Synchronization(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Diagnostics attached to a non-converged adaptive integral.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureFailure {
    pub estimate: f64,
    pub error_estimate: f64,
    pub intervals: usize,
    pub tolerance: f64,
}

impl fmt::Display for QuadratureFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "quadrature did not converge after {} intervals: estimate {:e}, error {:e} (tolerance {:e})",
            self.intervals, self.estimate, self.error_estimate, self.tolerance
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

/// Rejects NaN and infinities.
pub(crate) fn finite(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(invalid(name, format!("must be finite, got {value}")))
    }
}

pub(crate) fn positive(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(invalid(name, format!("must be finite and > 0, got {value}")))
    }
}

pub(crate) fn non_negative(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(invalid(name, format!("must be finite and >= 0, got {value}")))
    }
}

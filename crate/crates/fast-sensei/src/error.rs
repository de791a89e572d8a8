//! Error type shared across the crate.
//!
//! Errors split into two families: validation errors (bad arguments, bad
//! file contents, malformed shapes) and runtime errors (I/O failures,
//! non-finite values appearing mid-computation). The CLI maps the former to
//! exit code 2 and the latter to exit code 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("masked_softmax: all positions masked in a row")]
    AllMasked,

    #[error("cross_entropy_mean: every pixel carries the ignore label")]
    AllIgnored,

    #[error("quantized forward requested but activation scales are missing; run calibration first")]
    MissingCalibration,

    #[error("backward: loss is not a scalar on this tape")]
    DetachedLoss,

    #[error("{path}: bad file format: {detail}")]
    Format { path: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    /// True for errors caused by bad inputs rather than by the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::NonFinite { .. })
    }
}

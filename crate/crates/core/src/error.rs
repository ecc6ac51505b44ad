//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PrnError>;

#[derive(Debug, Error)]
pub enum PrnError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("unsupported stride {0} (supported: 2, 3, 4)")]
    UnsupportedStride(usize),

    #[error("unsupported scale factor {0} (supported: 2, 3, 4)")]
    UnsupportedScale(usize),

    #[error("invalid thresholds: require 0 <= gamma_upper <= gamma_low, got ({upper}, {low})")]
    InvalidThresholds { upper: f32, low: f32 },

    #[error("patch too small for {context}: {dim} (need >= {min})")]
    PatchTooSmall {
        context: &'static str,
        dim: usize,
        min: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("wrong color space: expected {expected}, got {actual}")]
    WrongColorSpace {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("batch mixes tags or scales; training batches must be homogeneous")]
    MixedBatch,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checkpoint version {0} not supported (expected {1})")]
    VersionMismatch(u16, u16),

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PrnError {
    pub(crate) fn shape(context: &'static str, expected: String, actual: String) -> Self {
        PrnError::ShapeMismatch {
            context,
            expected,
            actual,
        }
    }
}

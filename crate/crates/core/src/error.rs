use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is identically zero")]
    ZeroMatrix,

    #[error("input vector has zero norm")]
    ZeroInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid layer dimensions: {0}")]
    BadDims(String),

    #[error("matrix too large for the dense oracle: min dimension {min_dim} exceeds {cap}")]
    TooLarge { min_dim: usize, cap: usize },

    #[error("batch contains no rows with nonzero norm")]
    EmptyBatch,

    #[error("series is empty")]
    EmptySeries,

    #[error("no forward traces supplied")]
    EmptyTraces,

    #[error("target class {target} out of range for {classes} classes")]
    BadTarget { target: usize, classes: usize },

    #[error("trace does not belong to this model: {0}")]
    TraceMismatch(String),

    #[error("invalid input: {0}")]
    BadInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("logit-deviation region not reached after {steps} pre-training steps (worst deviation {worst:.3e})")]
    RegionNotReached { steps: usize, worst: f64 },

    #[error("spectrum is degenerate: sigma1/sigma2 = {ratio:.6} < {required}")]
    DegenerateSpectrum { ratio: f64, required: f64 },

    #[error("pathological alignment lost at step {step} (pathology ratio {ratio:.3})")]
    PathologyLost { step: usize, ratio: f64, report: Box<crate::theory::AmplificationReport> },

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },

    #[error("malformed snapshot: {0}")]
    Malformed(String),

    #[error("tensor name is {0} bytes, limit is 65535")]
    NameTooLong(usize),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("metric log out of order on line {line}: step {step} follows step {previous}")]
    OrderViolation { line: usize, previous: u64, step: u64 },
}

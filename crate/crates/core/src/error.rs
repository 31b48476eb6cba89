//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op} exceeds desk-scale limit: {rows}x{cols} = {elems} elements (max {max})")]
    TooLarge {
        op: &'static str,
        rows: usize,
        cols: usize,
        elems: usize,
        max: usize,
    },

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal {off:.3e})")]
    SvdNonConvergence { sweeps: usize, off: f64 },

    #[error("undefined input for {op}: {detail}")]
    Undefined { op: &'static str, detail: String },

    #[error("undefined metric {metric}: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: String,
    },

    #[error("integration diverged at step {step}: |{value:.3e}| exceeds {limit:.1e}")]
    Divergence { step: usize, value: f64, limit: f64 },

    #[error("cannot decode special token {token} at position {pos}")]
    SpecialToken { token: u32, pos: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ablation plan out of bounds: layer {layer}, {detail}")]
    PlanOutOfBounds { layer: usize, detail: String },

    #[error("{op} is not supported for the {arch} architecture")]
    UnsupportedArch { op: &'static str, arch: String },

    #[error("unsupported weight file version {found} (supported: {supported})")]
    FormatVersion { found: String, supported: u32 },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: String, detail: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("training diverged at step {step}: loss stayed above 10x the initial loss")]
    TrainingDiverged { step: usize, curve: Vec<f64> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

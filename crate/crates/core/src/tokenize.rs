//! Value tokenization and patching for the two model families.
//!
//! Token models mean-scale a context window and uniformly quantize it into a
//! fixed bin range; patch models instance-normalize and cut the window into
//! fixed-length patches. Both transforms are exactly invertible up to
//! quantization width, and both keep the inverse's parameters (scale or
//! mean/std) so forecasts come back in the original units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Padding token, also used to start decoding.
pub const PAD: u32 = 0;
/// End-of-context marker appended to encoder inputs.
pub const EOS: u32 = 1;
/// First token id carrying a quantized value.
pub const VALUE_OFFSET: u32 = 2;
/// Decoder rollouts start from this token.
pub const DECODER_START: u32 = PAD;

/// Uniform-bin value tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Number of value bins (token ids `2..vocab_size+2`).
    pub vocab_size: usize,
    pub range_low: f64,
    pub range_high: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { vocab_size: 512, range_low: -15.0, range_high: 15.0 }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "tokenizer needs at least 2 value bins, got {}",
                self.vocab_size
            )));
        }
        if !(self.range_low < self.range_high) {
            return Err(Error::Config(format!(
                "tokenizer range [{}, {}] is empty",
                self.range_low, self.range_high
            )));
        }
        Ok(())
    }

    /// Total token table size: value bins plus pad and eos.
    pub fn total_vocab(&self) -> usize {
        self.vocab_size + 2
    }

    pub fn bin_width(&self) -> f64 {
        (self.range_high - self.range_low) / self.vocab_size as f64
    }
}

/// Divides by the mean absolute value. A near-zero mean (below 1e-12) falls
/// back to scale 1 so all-zero contexts pass through unchanged.
pub fn mean_scale(values: &[f64]) -> (f64, Vec<f64>) {
    let mut scale = if values.is_empty() {
        1.0
    } else {
        values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64
    };
    if scale < 1e-12 {
        scale = 1.0;
    }
    (scale, values.iter().map(|v| v / scale).collect())
}

/// Quantizes already-scaled values into bin tokens. Out-of-range values clip
/// to the edge bins; clipping is the contract, not an error.
pub fn quantize(scaled: &[f64], cfg: &TokenizerConfig) -> Vec<u32> {
    let width = cfg.bin_width();
    scaled
        .iter()
        .map(|&v| {
            let bin = ((v - cfg.range_low) / width).floor();
            let bin = (bin.max(0.0) as usize).min(cfg.vocab_size - 1);
            bin as u32 + VALUE_OFFSET
        })
        .collect()
}

/// Maps tokens back to bin-center values times `scale`.
pub fn dequantize(tokens: &[u32], cfg: &TokenizerConfig, scale: f64) -> Result<Vec<f64>> {
    let width = cfg.bin_width();
    tokens
        .iter()
        .enumerate()
        .map(|(pos, &tok)| {
            if tok < VALUE_OFFSET || tok >= cfg.total_vocab() as u32 {
                return Err(Error::SpecialToken { token: tok, pos });
            }
            let bin = (tok - VALUE_OFFSET) as f64;
            Ok((cfg.range_low + (bin + 0.5) * width) * scale)
        })
        .collect()
}

/// Patch splitting configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub normalization: PatchNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchNorm {
    /// Subtract the context mean, divide by the context std.
    InstanceMeanStd,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { patch_len: 16, normalization: PatchNorm::InstanceMeanStd }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 {
            return Err(Error::Config("patch_len must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized patches plus everything needed to invert them.
#[derive(Debug, Clone)]
pub struct Patches {
    /// `n_patches x patch_len`, normalized units.
    pub matrix: Matrix,
    pub mean: f64,
    pub std: f64,
    /// Number of pad positions at the start of the first patch.
    pub pad_len: usize,
}

/// Instance-normalizes and splits into patches. A trailing remainder is
/// handled by left-padding the first patch with the first normalized value,
/// so patch boundaries stay aligned to the end of the context.
pub fn patchify(values: &[f64], cfg: &PatchConfig) -> Result<Patches> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Undefined { op: "patchify", detail: "empty series".into() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
    let normalized: Vec<f64> = values.iter().map(|v| (v - mean) / std).collect();

    let pad_len = (cfg.patch_len - values.len() % cfg.patch_len) % cfg.patch_len;
    let mut padded = vec![normalized[0]; pad_len];
    padded.extend_from_slice(&normalized);
    let n_patches = padded.len() / cfg.patch_len;
    Ok(Patches {
        matrix: Matrix::new(n_patches, cfg.patch_len, padded)?,
        mean,
        std,
        pad_len,
    })
}

/// Inverts [`patchify`]: drops pad positions and undoes the normalization.
pub fn unpatchify(patches: &Patches) -> Vec<f64> {
    patches
        .matrix
        .data()
        .iter()
        .skip(patches.pad_len)
        .map(|v| v * patches.std + patches.mean)
        .collect()
}

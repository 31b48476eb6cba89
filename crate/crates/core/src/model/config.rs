//! Model hyperparameters shared by both architectures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{PatchConfig, TokenizerConfig};

/// Architecture tag plus the input transform that goes with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    /// Token-level encoder-decoder over quantized values.
    EncoderDecoder { tokenizer: TokenizerConfig },
    /// Patch-level causal decoder with a direct multi-step head.
    DecoderOnly { patch: PatchConfig, head: HeadKind },
}

/// Output head for the patch model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One value per forecast point.
    Point,
    /// Nine quantile levels (0.1..0.9) per forecast point.
    Quantile9,
}

/// Quantile levels emitted by [`HeadKind::Quantile9`].
pub const QUANTILE_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Normalization used throughout the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// RMS normalization with a learned gain vector.
    RmsGain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    /// Maximum context length in time points; longer inputs truncate left.
    pub context_len: usize,
    /// Forecast horizon in time points.
    pub horizon: usize,
    pub norm: NormKind,
}

impl ModelConfig {
    /// Toy encoder-decoder defaults.
    pub fn chronos_toy() -> Self {
        Self {
            arch: Arch::EncoderDecoder { tokenizer: TokenizerConfig::default() },
            layers: 4,
            heads: 4,
            d_model: 64,
            d_head: 16,
            d_ff: 256,
            context_len: 256,
            horizon: 64,
            norm: NormKind::RmsGain,
        }
    }

    /// Toy patch-decoder defaults.
    pub fn patch_toy() -> Self {
        Self {
            arch: Arch::DecoderOnly { patch: PatchConfig::default(), head: HeadKind::Point },
            layers: 4,
            heads: 4,
            d_model: 64,
            d_head: 16,
            d_ff: 256,
            context_len: 256,
            horizon: 64,
            norm: NormKind::RmsGain,
        }
    }

    pub fn is_encoder_decoder(&self) -> bool {
        matches!(self.arch, Arch::EncoderDecoder { .. })
    }

    pub fn arch_name(&self) -> &'static str {
        match self.arch {
            Arch::EncoderDecoder { .. } => "encoder_decoder",
            Arch::DecoderOnly { .. } => "decoder_only",
        }
    }

    pub fn tokenizer(&self) -> Option<&TokenizerConfig> {
        match &self.arch {
            Arch::EncoderDecoder { tokenizer } => Some(tokenizer),
            Arch::DecoderOnly { .. } => None,
        }
    }

    pub fn patch(&self) -> Option<&PatchConfig> {
        match &self.arch {
            Arch::DecoderOnly { patch, .. } => Some(patch),
            Arch::EncoderDecoder { .. } => None,
        }
    }

    pub fn head_kind(&self) -> Option<HeadKind> {
        match &self.arch {
            Arch::DecoderOnly { head, .. } => Some(*head),
            Arch::EncoderDecoder { .. } => None,
        }
    }

    /// Width of the output map: token table for the token model, patch values
    /// (times quantile levels) for the patch model.
    pub fn out_dim(&self) -> usize {
        match &self.arch {
            Arch::EncoderDecoder { tokenizer } => tokenizer.total_vocab(),
            Arch::DecoderOnly { patch, head } => match head {
                HeadKind::Point => patch.patch_len,
                HeadKind::Quantile9 => QUANTILE_LEVELS.len() * patch.patch_len,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("layers, heads, and d_ff must be positive".into()));
        }
        if self.d_model != self.heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model ({}) must equal heads * d_head ({} * {})",
                self.d_model, self.heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config(format!(
                "d_head must be even for rotary pairs, got {}",
                self.d_head
            )));
        }
        if self.context_len == 0 || self.horizon == 0 {
            return Err(Error::Config("context_len and horizon must be positive".into()));
        }
        match &self.arch {
            Arch::EncoderDecoder { tokenizer } => tokenizer.validate()?,
            Arch::DecoderOnly { patch, .. } => patch.validate()?,
        }
        Ok(())
    }
}

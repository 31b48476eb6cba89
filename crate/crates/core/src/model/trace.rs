//! Forward-pass traces: everything the analysis passes need to look inside
//! a rollout without re-deriving it.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::Matrix;

/// Records taken at one decode step, always at the emitting position
/// (the last row of the current prefix).
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// Residual stream after each layer: index 0 is the embedding, index l
    /// the state after layer l. Length is `layers_run + 1`.
    pub residuals: Vec<Vec<f64>>,
    /// Self-attention row of the emitting position, `[layer][head][key]`.
    pub self_rows: Vec<Vec<Vec<f64>>>,
    /// Cross-attention row over the encoder sequence, `[layer][head][key]`.
    /// Empty for decoder-only models.
    pub cross_rows: Vec<Vec<Vec<f64>>>,
    /// Residual write of each self-attention head, `[layer][head][dim]`.
    /// Ablated heads record zeros.
    pub self_head_writes: Vec<Vec<Vec<f64>>>,
    /// Total self-attention residual write per layer.
    pub self_write: Vec<Vec<f64>>,
    /// Residual write of each cross-attention head.
    pub cross_head_writes: Vec<Vec<Vec<f64>>>,
    /// Total cross-attention residual write per layer.
    pub cross_write: Vec<Vec<f64>>,
    /// Final-normed state that feeds the output map.
    pub pre_out: Vec<f64>,
    /// Output of the map: token logits, or direct patch values.
    pub logits: Vec<f64>,
}

/// Trace of a whole rollout.
#[derive(Debug, Clone)]
pub struct ForecastTrace {
    pub config: ModelConfig,
    /// Encoder input tokens (token models only).
    pub enc_tokens: Vec<u32>,
    /// Full encoder self-attention, `[layer][head]` as `enc_len x enc_len`.
    pub enc_attn: Vec<Vec<Matrix>>,
    /// Decoder tokens actually consumed, starting with the prefix.
    pub dec_tokens: Vec<u32>,
    pub steps: Vec<StepTrace>,
    /// Value scale of the context (mean-abs scale or instance std).
    pub scale: f64,
    /// Value offset of the context (zero for token models, mean for patches).
    pub offset: f64,
}

impl ForecastTrace {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Layers actually run (can be fewer than configured when truncated).
    pub fn layers_run(&self) -> usize {
        self.steps.first().map_or(0, |s| s.self_rows.len())
    }
}

/// Per-head residual write across the rollout: a `steps x d_model` matrix
/// whose row t is what the head added to the stream at decode step t.
pub fn head_contribution(trace: &ForecastTrace, layer: usize, head: usize) -> Result<Matrix> {
    contribution(trace, layer, head, false)
}

/// Same as [`head_contribution`] but for cross-attention heads.
pub fn cross_head_contribution(trace: &ForecastTrace, layer: usize, head: usize) -> Result<Matrix> {
    contribution(trace, layer, head, true)
}

fn contribution(trace: &ForecastTrace, layer: usize, head: usize, cross: bool) -> Result<Matrix> {
    if layer >= trace.layers_run() || head >= trace.config.heads {
        return Err(Error::PlanOutOfBounds {
            layer,
            detail: format!(
                "head {head}: trace covers {} layers x {} heads",
                trace.layers_run(),
                trace.config.heads
            ),
        });
    }
    let rows: Vec<Vec<f64>> = trace
        .steps
        .iter()
        .map(|s| {
            let source = if cross { &s.cross_head_writes } else { &s.self_head_writes };
            if cross && source[layer].is_empty() {
                return Err(Error::UnsupportedArch {
                    op: "cross_head_contribution",
                    arch: trace.config.arch_name().to_string(),
                });
            }
            Ok(source[layer][head].clone())
        })
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

/// Total self-attention write of a layer across the rollout.
pub fn layer_self_write(trace: &ForecastTrace, layer: usize) -> Result<Matrix> {
    if layer >= trace.layers_run() {
        return Err(Error::PlanOutOfBounds {
            layer,
            detail: format!("trace covers {} layers", trace.layers_run()),
        });
    }
    let rows: Vec<Vec<f64>> = trace.steps.iter().map(|s| s.self_write[layer].clone()).collect();
    Matrix::from_rows(&rows)
}

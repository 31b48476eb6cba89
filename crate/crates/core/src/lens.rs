//! Instruments for looking inside a rollout: logit maps over the residual
//! stream, per-layer entropy curves, layer-truncated forecasts, attention
//! rollouts, head sharpness profiles, the entropic rank of head outputs,
//! and a repeated-random-tokens probe for induction behavior.

use serde::{Deserialize, Serialize};

use crate::ablate::AttnKind;
use crate::error::{Error, Result};
use crate::evalmetrics;
use crate::model::blocks::{rms_denom, rms_norm};
use crate::model::{
    decode_tokens, forecast, DecodePolicy, ForecastOutput, ForecastTrace, ForwardOptions,
    ModelBundle,
};
use crate::numerics::{entropy, norm2, softmax_in_place, svd, vec_mat, Matrix, Rng};
use crate::report;
use crate::synthdata::TimeSeries;
use crate::tokenize::{DECODER_START, VALUE_OFFSET};

/// Largest normalized attention entropy a sharp head may have.
pub const SHARP_MAX_ENTROPY: f64 = 0.38;

/// Smallest normalized attention entropy of a diffuse head, the symmetric
/// complement of the sharp threshold.
pub const DIFFUSE_MIN_ENTROPY: f64 = 1.0 - SHARP_MAX_ENTROPY;

/// Minimum prefix-matching score of an induction head.
pub const PREFIX_THRESHOLD: f64 = 0.3;

/// Minimum copy score (z-scored logit attribution) of an induction head.
pub const COPY_THRESHOLD: f64 = 2.0;

/// Floor inside the spectrum-entropy logarithm.
pub const RANK_EPS: f64 = 1e-12;

/// Softmaxed logits read off the residual stream after every layer.
///
/// `maps[0]` is the embedding alone; `maps[l]` the state after layer `l`.
/// Each map is steps x vocab and every row is a probability distribution.
#[derive(Debug, Clone)]
pub struct LogitMap {
    pub maps: Vec<Matrix>,
}

impl LogitMap {
    pub fn layers(&self) -> usize {
        self.maps.len().saturating_sub(1)
    }

    pub fn steps(&self) -> usize {
        self.maps.first().map_or(0, Matrix::rows)
    }

    pub fn vocab(&self) -> usize {
        self.maps.first().map_or(0, Matrix::cols)
    }
}

/// Runs a greedy rollout and reads token distributions off the residual
/// stream after every layer, applying the final norm and output map each
/// time. The last map reproduces the model's own output distribution
/// exactly.
pub fn dla_logit_maps(bundle: &ModelBundle, context: &TimeSeries) -> Result<LogitMap> {
    if !bundle.config.is_encoder_decoder() {
        return Err(Error::UnsupportedArch {
            op: "dla_logit_maps",
            arch: bundle.config.arch_name().to_string(),
        });
    }
    let trace = traced_forecast(bundle, context)?;
    let maps = residual_output_maps(bundle, &trace, true)?;
    Ok(LogitMap { maps })
}

/// The patch-model counterpart of [`dla_logit_maps`]: maps the residual
/// stream after every layer through the output head, giving the forecast
/// each prefix of the stack would produce. No softmax; rows are values.
pub fn layer_forecast_maps(bundle: &ModelBundle, context: &TimeSeries) -> Result<Vec<Matrix>> {
    if bundle.config.is_encoder_decoder() {
        return Err(Error::UnsupportedArch {
            op: "layer_forecast_maps",
            arch: bundle.config.arch_name().to_string(),
        });
    }
    let trace = traced_forecast(bundle, context)?;
    residual_output_maps(bundle, &trace, false)
}

fn traced_forecast(bundle: &ModelBundle, context: &TimeSeries) -> Result<ForecastTrace> {
    let out = forecast(bundle, context, ForwardOptions::traced())?;
    out.trace.ok_or(Error::Config("traced forecast returned no trace".into()))
}

fn residual_output_maps(bundle: &ModelBundle, trace: &ForecastTrace, softmax: bool) -> Result<Vec<Matrix>> {
    let weights = &bundle.weights;
    let stages = trace.layers_run() + 1;
    let mut maps = Vec::with_capacity(stages);
    for stage in 0..stages {
        let rows: Vec<Vec<f64>> = trace
            .steps
            .iter()
            .map(|step| {
                let mut out = vec_mat(&rms_norm(&step.residuals[stage], &weights.final_norm), &weights.w_out);
                if softmax {
                    softmax_in_place(&mut out, 1.0);
                }
                out
            })
            .collect();
        maps.push(Matrix::from_rows(&rows)?);
    }
    Ok(maps)
}

/// Mean Shannon entropy (nats) of each layer's distributions over the
/// decoded steps.
pub fn layer_entropy_curve(map: &LogitMap) -> Vec<f64> {
    map.maps
        .iter()
        .map(|m| {
            let total: f64 = (0..m.rows()).map(|r| entropy(m.row(r))).sum();
            total / m.rows().max(1) as f64
        })
        .collect()
}

/// Forecast produced by only the first `layer` decoder layers, with the
/// output map applied to the truncated stream. `layer` equal to the depth
/// reproduces the ordinary forecast.
pub fn truncated_forecast(bundle: &ModelBundle, context: &TimeSeries, layer: usize) -> Result<ForecastOutput> {
    let opts = ForwardOptions { truncate_at: Some(layer), ..ForwardOptions::default() };
    forecast(bundle, context, opts)
}

/// One depth of the truncation table.
#[derive(Debug, Clone, Serialize)]
pub struct TruncationRow {
    pub layer: usize,
    pub forecast: Vec<f64>,
    /// Scaled error against the provided actuals; `None` when undefined.
    pub mase: Option<f64>,
}

/// Truncated forecasts and their errors for every depth 0..=L.
pub fn truncation_table(
    bundle: &ModelBundle,
    context: &TimeSeries,
    actual: &[f64],
    season: usize,
) -> Result<Vec<TruncationRow>> {
    let insample = context.channel(0);
    let mut rows = Vec::with_capacity(bundle.config.layers + 1);
    for layer in 0..=bundle.config.layers {
        let out = truncated_forecast(bundle, context, layer)?;
        let mut values = out.forecast.channel(0);
        values.truncate(actual.len());
        let mase = evalmetrics::mase(&values, actual, &insample, season)?.value;
        rows.push(TruncationRow { layer, forecast: values, mase });
    }
    Ok(rows)
}

/// Attention of each decoding step's emitting token over the context,
/// stacked into a context-by-steps matrix: column t is how decoder token
/// t-1 attended when predicting step t. Every column sums to 1.
#[derive(Debug, Clone)]
pub struct AttentionRollout {
    pub layer: usize,
    pub head: usize,
    pub matrix: Matrix,
    /// Set when built from the causal self-attention of a decoder-only
    /// model; columns are zero-padded up to the final prefix length.
    pub self_attention_variant: bool,
}

/// Builds one head's rollout from an existing trace.
pub fn rollout_from_trace(trace: &ForecastTrace, layer: usize, head: usize) -> Result<AttentionRollout> {
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
    let cross = trace.steps[0].cross_rows.first().is_some_and(|l| !l.is_empty());
    let columns: Vec<&Vec<f64>> = trace
        .steps
        .iter()
        .map(|s| if cross { &s.cross_rows[layer][head] } else { &s.self_rows[layer][head] })
        .collect();
    let c = columns.iter().map(|col| col.len()).max().unwrap_or(0);
    let mut matrix = Matrix::zeros(c, columns.len());
    for (t, col) in columns.iter().enumerate() {
        for (i, &w) in col.iter().enumerate() {
            matrix.set(i, t, w);
        }
    }
    Ok(AttentionRollout { layer, head, matrix, self_attention_variant: !cross })
}

/// Cross-attention rollouts for every (layer, head) of an encoder-decoder
/// model, from a single traced greedy forecast.
pub fn attention_rollouts(bundle: &ModelBundle, context: &TimeSeries) -> Result<Vec<AttentionRollout>> {
    if !bundle.config.is_encoder_decoder() {
        return Err(Error::UnsupportedArch {
            op: "attention_rollouts",
            arch: bundle.config.arch_name().to_string(),
        });
    }
    let trace = traced_forecast(bundle, context)?;
    all_rollouts(&trace)
}

/// Causal self-attention rollouts for any architecture, flagged as the
/// self-attention variant on decoder-only models.
pub fn self_attention_rollouts(bundle: &ModelBundle, context: &TimeSeries) -> Result<Vec<AttentionRollout>> {
    let mut trace = traced_forecast(bundle, context)?;
    for step in &mut trace.steps {
        step.cross_rows.clear();
    }
    all_rollouts(&trace)
}

fn all_rollouts(trace: &ForecastTrace) -> Result<Vec<AttentionRollout>> {
    let mut out = Vec::new();
    for layer in 0..trace.layers_run() {
        for head in 0..trace.config.heads {
            out.push(rollout_from_trace(trace, layer, head)?);
        }
    }
    Ok(out)
}

/// Mean Shannon entropy of the rollout's columns, in nats.
pub fn rollout_entropy(rollout: &AttentionRollout) -> f64 {
    let m = &rollout.matrix;
    if m.cols() == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut column = vec![0.0; m.rows()];
    for t in 0..m.cols() {
        for i in 0..m.rows() {
            column[i] = m.get(i, t);
        }
        total += entropy(&column);
    }
    total / m.cols() as f64
}

/// Min-max normalizes raw entropies across the heads of one model on one
/// input. A spread of zero gives every head 0.5, committing to neither
/// extreme.
pub fn normalize_entropies(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || max == min {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|&e| (e - min) / (max - min)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharpness {
    Sharp,
    Diffuse,
    Neither,
}

/// Sharp at or below the threshold, diffuse at or above its complement,
/// neither in between.
pub fn classify_sharp(normalized_entropy: f64, sharp_max: f64) -> Sharpness {
    if normalized_entropy <= sharp_max {
        Sharpness::Sharp
    } else if normalized_entropy >= 1.0 - sharp_max {
        Sharpness::Diffuse
    } else {
        Sharpness::Neither
    }
}

/// Everything measured about one attention head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadProfile {
    pub layer: usize,
    pub head: usize,
    pub raw_entropy: f64,
    pub normalized_entropy: f64,
    pub class: Sharpness,
    pub prefix_score: Option<f64>,
    pub copy_score: Option<f64>,
    pub induction: Option<bool>,
}

/// Profiles every head of the model on one context: rollout entropies,
/// min-max normalization across heads, and the sharp/diffuse/neither call.
/// Induction fields stay empty until [`apply_rrt`] merges a probe report.
pub fn head_profiles(bundle: &ModelBundle, context: &TimeSeries) -> Result<Vec<HeadProfile>> {
    let rollouts = if bundle.config.is_encoder_decoder() {
        attention_rollouts(bundle, context)?
    } else {
        self_attention_rollouts(bundle, context)?
    };
    let raw: Vec<f64> = rollouts.iter().map(rollout_entropy).collect();
    let normalized = normalize_entropies(&raw);
    Ok(rollouts
        .iter()
        .zip(raw.iter().zip(&normalized))
        .map(|(r, (&raw_entropy, &normalized_entropy))| HeadProfile {
            layer: r.layer,
            head: r.head,
            raw_entropy,
            normalized_entropy,
            class: classify_sharp(normalized_entropy, SHARP_MAX_ENTROPY),
            prefix_score: None,
            copy_score: None,
            induction: None,
        })
        .collect())
}

/// Copies prefix/copy/induction results into matching profiles.
pub fn apply_rrt(profiles: &mut [HeadProfile], probe: &RrtReport) {
    for score in &probe.scores {
        if let Some(p) = profiles.iter_mut().find(|p| p.layer == score.layer && p.head == score.head) {
            p.prefix_score = Some(score.prefix_score);
            p.copy_score = Some(score.copy_score);
            p.induction = Some(score.induction);
        }
    }
}

/// Effective number of distinct directions among head output vectors at
/// one location: exp of the Shannon entropy of the normalized singular
/// value spectrum of their cosine Gram matrix. `None` when every vector is
/// zero (the location carries no head signal).
pub fn location_spectrum_entropy(vectors: &[Vec<f64>]) -> Result<Option<f64>> {
    let live: Vec<&Vec<f64>> = vectors.iter().filter(|v| norm2(v) > 0.0).collect();
    if live.is_empty() {
        return Ok(None);
    }
    let h = live.len();
    let mut gram = Matrix::zeros(h, h);
    let units: Vec<Vec<f64>> = live
        .iter()
        .map(|v| {
            let n = norm2(v);
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    for i in 0..h {
        for j in 0..h {
            let dot: f64 = units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum();
            gram.set(i, j, dot);
        }
    }
    let spectrum = svd(&gram)?.singular_values;
    let weights: Vec<f64> = spectrum.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let total: f64 = weights.iter().sum();
    let ent = -weights
        .iter()
        .map(|w| {
            let p = w / total;
            p * p.max(RANK_EPS).ln()
        })
        .sum::<f64>();
    Ok(Some(ent))
}

/// Entropic rank of a layer's heads over a batch of forecasts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropicRank {
    pub layer: usize,
    pub kind: AttnKind,
    /// exp of the mean location entropy; between 1 and the head count.
    pub rank: f64,
    pub locations_scored: usize,
    pub locations_skipped: usize,
}

/// Aggregates per-location spectrum entropies into one rank figure.
/// `writes[location][head]` holds the head output vectors.
pub fn entropic_rank_of_writes(writes: &[Vec<Vec<f64>>]) -> Result<(f64, usize, usize)> {
    let mut entropies = Vec::new();
    let mut skipped = 0usize;
    for location in writes {
        match location_spectrum_entropy(location)? {
            Some(e) => entropies.push(e),
            None => skipped += 1,
        }
    }
    if entropies.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "entropic_rank",
            reason: "every location had all-zero head outputs".into(),
        });
    }
    let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
    Ok((mean.exp(), entropies.len(), skipped))
}

/// How many effectively distinct directions a layer's heads write into the
/// residual stream, averaged over every (series, step) location of greedy
/// rollouts on the given contexts.
pub fn entropic_rank(
    bundle: &ModelBundle,
    contexts: &[TimeSeries],
    layer: usize,
    kind: AttnKind,
) -> Result<EntropicRank> {
    if layer >= bundle.config.layers {
        return Err(Error::Config(format!("layer {layer} out of range, model has {}", bundle.config.layers)));
    }
    if kind == AttnKind::CrossAttn && !bundle.config.is_encoder_decoder() {
        return Err(Error::UnsupportedArch {
            op: "entropic_rank",
            arch: bundle.config.arch_name().to_string(),
        });
    }
    if contexts.is_empty() {
        return Err(Error::Config("entropic rank needs at least one context".into()));
    }
    let mut writes = Vec::new();
    for context in contexts {
        let trace = traced_forecast(bundle, context)?;
        for step in &trace.steps {
            let source = match kind {
                AttnKind::SelfAttn => &step.self_head_writes[layer],
                AttnKind::CrossAttn => &step.cross_head_writes[layer],
            };
            writes.push(source.clone());
        }
    }
    let (rank, scored, skipped) = entropic_rank_of_writes(&writes)?;
    Ok(EntropicRank { layer, kind, rank, locations_scored: scored, locations_skipped: skipped })
}

/// Mean attention mass a head places on the most recent previous instance
/// of each current token. `rows[j]` is the attention over context positions
/// at step j, whose current token is `seq[j-1]`; steps whose current token
/// has no previous instance (including step 0) are skipped. `None` if no
/// step could be scored.
pub fn prefix_score(seq: &[u32], rows: &[Vec<f64>]) -> Option<f64> {
    let mut scored = Vec::new();
    for (j, row) in rows.iter().enumerate().skip(1) {
        let current = seq[j - 1];
        if let Some(p) = seq[..j - 1].iter().rposition(|&t| t == current) {
            scored.push(row[p]);
        }
    }
    evalmetrics::arithmetic_mean(&scored)
}

fn z_score(values: &[f64], idx: usize) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return 0.0;
    }
    (values[idx] - mean) / var.sqrt()
}

/// One head's repeated-random-tokens numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RrtScore {
    pub layer: usize,
    pub head: usize,
    /// Mean attention to the most recent previous instance of the current
    /// token, in [0, 1].
    pub prefix_score: f64,
    /// Mean z-score of the correct token's logit attribution from this
    /// head, over the value-bin vocabulary.
    pub copy_score: f64,
    pub induction: bool,
}

/// Repeated-random-tokens probe results for every cross-attention head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RrtReport {
    pub motif_len: usize,
    pub repeats: usize,
    pub seed: u64,
    /// The repeated token sequence fed to the encoder (without the EOS).
    pub sequence: Vec<u32>,
    pub scores: Vec<RrtScore>,
}

impl RrtReport {
    pub fn induction_flags(&self) -> Vec<bool> {
        self.scores.iter().map(|s| s.induction).collect()
    }
}

/// Feeds a repeated random token sequence through the model with teacher
/// forcing and scores every cross-attention head for prefix matching and
/// copying. A head is an induction head when its prefix score reaches 0.3
/// and its copy score reaches 2 standard deviations.
pub fn rrt_test(bundle: &ModelBundle, seed: u64, motif_len: usize, repeats: usize) -> Result<RrtReport> {
    let cfg = &bundle.config;
    let tokenizer = cfg.tokenizer().ok_or(Error::UnsupportedArch {
        op: "rrt_test",
        arch: cfg.arch_name().to_string(),
    })?;
    if motif_len == 0 || repeats < 2 {
        return Err(Error::Config("the probe needs a non-empty motif and at least 2 repeats".into()));
    }
    if motif_len * repeats > cfg.context_len {
        return Err(Error::Config(format!(
            "motif {motif_len} x {repeats} repeats exceeds the context length {}",
            cfg.context_len
        )));
    }

    let mut rng = Rng::new(seed);
    let motif: Vec<u32> =
        (0..motif_len).map(|_| VALUE_OFFSET + rng.next_below(tokenizer.vocab_size) as u32).collect();
    let mut sequence = Vec::with_capacity(motif_len * repeats);
    for _ in 0..repeats {
        sequence.extend_from_slice(&motif);
    }
    let mut enc_tokens = sequence.clone();
    enc_tokens.push(crate::tokenize::EOS);

    let opts = ForwardOptions {
        want_trace: true,
        policy: DecodePolicy::Forced(&sequence),
        ..ForwardOptions::default()
    };
    let out = decode_tokens(bundle, &enc_tokens, &[DECODER_START], sequence.len(), 1.0, opts)?;
    let trace = out.trace.ok_or(Error::Config("probe returned no trace".into()))?;

    let mut scores = Vec::new();
    for layer in 0..cfg.layers {
        for head in 0..cfg.heads {
            let rows: Vec<Vec<f64>> =
                trace.steps.iter().map(|s| s.cross_rows[layer][head].clone()).collect();
            let prefix = prefix_score(&sequence, &rows).unwrap_or(0.0);
            let copy = head_copy_score(bundle, &trace, layer, head, &sequence);
            scores.push(RrtScore {
                layer,
                head,
                prefix_score: prefix,
                copy_score: copy,
                induction: prefix >= PREFIX_THRESHOLD && copy >= COPY_THRESHOLD,
            });
        }
    }
    Ok(RrtReport { motif_len, repeats, seed, sequence, scores })
}

/// Mean z-score of the answer token inside the head's direct logit
/// attribution, taken over the value-bin vocabulary at every step. The
/// attribution sends the head's residual write through the final norm
/// frozen at the full stream's scale, then the output map.
fn head_copy_score(
    bundle: &ModelBundle,
    trace: &ForecastTrace,
    layer: usize,
    head: usize,
    answers: &[u32],
) -> f64 {
    let weights = &bundle.weights;
    let bins = VALUE_OFFSET as usize;
    let mut total = 0.0;
    for (step, &answer) in trace.steps.iter().zip(answers) {
        let denom = rms_denom(step.residuals.last().expect("trace has residual stages"));
        let write = &step.cross_head_writes[layer][head];
        let scaled: Vec<f64> =
            write.iter().zip(&weights.final_norm).map(|(w, g)| w * g / denom).collect();
        let attribution = vec_mat(&scaled, &weights.w_out);
        total += z_score(&attribution[bins..], answer as usize - bins);
    }
    total / trace.steps.len() as f64
}

/// Joint proportions of induction and sharp heads, plus the two
/// conditional overlap ratios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapTable {
    pub heads: usize,
    pub both: f64,
    pub induction_only: f64,
    pub sharp_only: f64,
    pub neither: f64,
    pub p_induction: f64,
    pub p_sharp: f64,
    pub p_sharp_given_induction: Option<f64>,
    pub p_induction_given_sharp: Option<f64>,
}

pub fn overlap_table(induction: &[bool], sharp: &[bool]) -> Result<OverlapTable> {
    if induction.len() != sharp.len() || induction.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "overlap_table",
            detail: format!("flag lengths {} vs {}", induction.len(), sharp.len()),
        });
    }
    let n = induction.len() as f64;
    let count = |f: &dyn Fn(bool, bool) -> bool| {
        induction.iter().zip(sharp).filter(|&(&i, &s)| f(i, s)).count() as f64 / n
    };
    let both = count(&|i, s| i && s);
    let p_induction = count(&|i, _| i);
    let p_sharp = count(&|_, s| s);
    Ok(OverlapTable {
        heads: induction.len(),
        both,
        induction_only: count(&|i, s| i && !s),
        sharp_only: count(&|i, s| !i && s),
        neither: count(&|i, s| !i && !s),
        p_induction,
        p_sharp,
        p_sharp_given_induction: (p_induction > 0.0).then(|| both / p_induction),
        p_induction_given_sharp: (p_sharp > 0.0).then(|| both / p_sharp),
    })
}

/// Long-form CSV of a logit map: one row per (layer, step, token).
pub fn logit_map_csv(map: &LogitMap) -> String {
    let mut rows = Vec::new();
    for (layer, m) in map.maps.iter().enumerate() {
        for step in 0..m.rows() {
            for token in 0..m.cols() {
                rows.push(vec![
                    layer.to_string(),
                    step.to_string(),
                    token.to_string(),
                    m.get(step, token).to_string(),
                ]);
            }
        }
    }
    report::csv_body(&["layer", "step", "token", "prob"], &rows)
}

/// Long-form CSV of attention rollouts: one row per (layer, head,
/// context position, step).
pub fn rollout_csv(rollouts: &[AttentionRollout]) -> String {
    let mut rows = Vec::new();
    for r in rollouts {
        for i in 0..r.matrix.rows() {
            for t in 0..r.matrix.cols() {
                rows.push(vec![
                    r.layer.to_string(),
                    r.head.to_string(),
                    i.to_string(),
                    t.to_string(),
                    r.matrix.get(i, t).to_string(),
                ]);
            }
        }
    }
    report::csv_body(&["layer", "head", "context_pos", "step", "weight"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, Arch, HeadKind, ModelConfig, NormKind};
    use crate::model::weights::EmbedWeights;
    use crate::tokenize::{PatchConfig, TokenizerConfig};

    fn encdec_config(layers: usize) -> ModelConfig {
        ModelConfig {
            arch: Arch::EncoderDecoder {
                tokenizer: TokenizerConfig { vocab_size: 32, ..TokenizerConfig::default() },
            },
            layers,
            heads: 2,
            d_model: 16,
            d_head: 8,
            d_ff: 32,
            context_len: 64,
            horizon: 5,
            norm: NormKind::RmsGain,
        }
    }

    fn patch_config() -> ModelConfig {
        ModelConfig {
            arch: Arch::DecoderOnly {
                patch: PatchConfig { patch_len: 4, ..PatchConfig::default() },
                head: HeadKind::Point,
            },
            layers: 2,
            heads: 2,
            d_model: 16,
            d_head: 8,
            d_ff: 32,
            context_len: 32,
            horizon: 8,
            norm: NormKind::RmsGain,
        }
    }

    fn context(n: usize, seed: u64) -> TimeSeries {
        let mut rng = Rng::new(seed);
        let values: Vec<f64> =
            (0..n).map(|t| (0.3 * t as f64).sin() * 2.0 + 0.1 * rng.next_gaussian()).collect();
        TimeSeries::univariate("ctx", 1.0, values).unwrap()
    }

    #[test]
    fn final_layer_map_is_the_model_distribution() {
        let bundle = init_weights(&encdec_config(3), &mut Rng::new(50)).unwrap();
        let ctx = context(24, 51);
        let map = dla_logit_maps(&bundle, &ctx).unwrap();
        assert_eq!(map.maps.len(), 4);

        let trace = traced_forecast(&bundle, &ctx).unwrap();
        for (t, step) in trace.steps.iter().enumerate() {
            let mut expect = step.logits.clone();
            softmax_in_place(&mut expect, 1.0);
            assert_eq!(map.maps[3].row(t), expect.as_slice(), "step {t}");
        }
    }

    #[test]
    fn embedding_map_matches_a_hand_composed_pipeline() {
        let bundle = init_weights(&encdec_config(1), &mut Rng::new(52)).unwrap();
        let ctx = context(20, 53);
        let map = dla_logit_maps(&bundle, &ctx).unwrap();

        let EmbedWeights::Tokens { table } = &bundle.weights.embed else { panic!("token model") };
        let trace = traced_forecast(&bundle, &ctx).unwrap();
        for (t, step) in trace.steps.iter().enumerate() {
            // The emitting position during step t holds the t-th decoder
            // token, whose embedding is the stage-0 residual.
            let tok = trace.dec_tokens[t] as usize;
            assert_eq!(step.residuals[0], table.row(tok).to_vec());
            let mut expect = vec_mat(&rms_norm(table.row(tok), &bundle.weights.final_norm), &bundle.weights.w_out);
            softmax_in_place(&mut expect, 1.0);
            assert_eq!(map.maps[0].row(t), expect.as_slice());
        }
    }

    #[test]
    fn rows_are_distributions_and_zero_output_map_is_uniform() {
        let mut bundle = init_weights(&encdec_config(2), &mut Rng::new(54)).unwrap();
        let ctx = context(16, 55);
        let map = dla_logit_maps(&bundle, &ctx).unwrap();
        for m in &map.maps {
            for t in 0..m.rows() {
                let sum: f64 = m.row(t).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }

        // Zeroing the output map collapses every layer's logits to a
        // constant row, i.e. the uniform distribution with entropy ln V.
        let vocab = bundle.config.out_dim();
        bundle.weights.w_out = Matrix::zeros(bundle.config.d_model, vocab);
        let uniform = dla_logit_maps(&bundle, &ctx).unwrap();
        let curve = layer_entropy_curve(&uniform);
        assert_eq!(curve.len(), 3);
        for e in curve {
            assert!((e - (vocab as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_curve_matches_per_step_recomputation() {
        let bundle = init_weights(&encdec_config(2), &mut Rng::new(56)).unwrap();
        let map = dla_logit_maps(&bundle, &context(18, 57)).unwrap();
        let curve = layer_entropy_curve(&map);
        for (l, m) in map.maps.iter().enumerate() {
            let mut total = 0.0;
            for t in 0..m.rows() {
                total -= m.row(t).iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            }
            assert!((curve[l] - total / m.rows() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn map_variants_check_the_architecture() {
        let patch = init_weights(&patch_config(), &mut Rng::new(58)).unwrap();
        let ctx = context(20, 59);
        assert!(matches!(dla_logit_maps(&patch, &ctx), Err(Error::UnsupportedArch { .. })));

        let maps = layer_forecast_maps(&patch, &ctx).unwrap();
        assert_eq!(maps.len(), 3);
        let trace = traced_forecast(&patch, &ctx).unwrap();
        for (t, step) in trace.steps.iter().enumerate() {
            assert_eq!(maps[2].row(t), step.logits.as_slice());
        }

        let encdec = init_weights(&encdec_config(1), &mut Rng::new(60)).unwrap();
        assert!(matches!(layer_forecast_maps(&encdec, &ctx), Err(Error::UnsupportedArch { .. })));
    }

    #[test]
    fn truncation_endpoints_and_table() {
        let bundle = init_weights(&encdec_config(3), &mut Rng::new(61)).unwrap();
        let ctx = context(22, 62);
        let full = forecast(&bundle, &ctx, ForwardOptions::default()).unwrap();
        let cut = truncated_forecast(&bundle, &ctx, 3).unwrap();
        assert_eq!(full.forecast.channel(0), cut.forecast.channel(0));

        let a = truncated_forecast(&bundle, &ctx, 0).unwrap();
        let b = truncated_forecast(&bundle, &ctx, 0).unwrap();
        assert_eq!(a.forecast.channel(0), b.forecast.channel(0));

        let actual = [1.0, 0.5, -0.3, 0.2, 0.9];
        let table = truncation_table(&bundle, &ctx, &actual, 1).unwrap();
        assert_eq!(table.len(), 4);
        for row in &table {
            assert_eq!(row.forecast.len(), actual.len());
            assert!(row.mase.is_some());
        }
        assert_eq!(table[3].forecast, full.forecast.channel(0));
    }

    #[test]
    fn rollout_columns_are_distributions_matching_the_trace() {
        let bundle = init_weights(&encdec_config(2), &mut Rng::new(63)).unwrap();
        let ctx = context(21, 64);
        let rollouts = attention_rollouts(&bundle, &ctx).unwrap();
        assert_eq!(rollouts.len(), 4);

        let trace = traced_forecast(&bundle, &ctx).unwrap();
        let enc_len = trace.enc_tokens.len();
        for r in &rollouts {
            assert!(!r.self_attention_variant);
            assert_eq!(r.matrix.rows(), enc_len);
            assert_eq!(r.matrix.cols(), trace.n_steps());
            for t in 0..r.matrix.cols() {
                let mut sum = 0.0;
                for i in 0..r.matrix.rows() {
                    let w = r.matrix.get(i, t);
                    assert!((0.0..=1.0).contains(&w));
                    assert_eq!(w, trace.steps[t].cross_rows[r.layer][r.head][i]);
                    sum += w;
                }
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_step_rollout_is_one_column() {
        let mut cfg = encdec_config(1);
        cfg.horizon = 1;
        let bundle = init_weights(&cfg, &mut Rng::new(65)).unwrap();
        let r = &attention_rollouts(&bundle, &context(12, 66)).unwrap()[0];
        assert_eq!(r.matrix.cols(), 1);
        let sum: f64 = (0..r.matrix.rows()).map(|i| r.matrix.get(i, 0)).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn patch_models_get_the_flagged_self_attention_variant() {
        let bundle = init_weights(&patch_config(), &mut Rng::new(67)).unwrap();
        let ctx = context(20, 68);
        assert!(matches!(attention_rollouts(&bundle, &ctx), Err(Error::UnsupportedArch { .. })));

        let rollouts = self_attention_rollouts(&bundle, &ctx).unwrap();
        for r in &rollouts {
            assert!(r.self_attention_variant);
            for t in 0..r.matrix.cols() {
                let sum: f64 = (0..r.matrix.rows()).map(|i| r.matrix.get(i, t)).sum();
                assert!((sum - 1.0).abs() < 1e-9, "padded column still sums to 1");
            }
        }
        // Early columns really are zero-padded at the tail.
        let first = &rollouts[0];
        assert_eq!(first.matrix.get(first.matrix.rows() - 1, 0), 0.0);
    }

    fn fixture_rollout(matrix: Matrix) -> AttentionRollout {
        AttentionRollout { layer: 0, head: 0, matrix, self_attention_variant: false }
    }

    #[test]
    fn rollout_entropy_endpoints() {
        // One-hot columns: zero entropy.
        let mut onehot = Matrix::zeros(4, 3);
        for t in 0..3 {
            onehot.set(t, t, 1.0);
        }
        assert_eq!(rollout_entropy(&fixture_rollout(onehot)), 0.0);

        let mut uniform = Matrix::zeros(4, 2);
        for t in 0..2 {
            for i in 0..4 {
                uniform.set(i, t, 0.25);
            }
        }
        let e = rollout_entropy(&fixture_rollout(uniform));
        assert!((e - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_normalization_is_min_max() {
        let norm = normalize_entropies(&[0.0, 2.0, 1.0]);
        assert_eq!(norm, vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_entropies(&[0.7, 0.7]), vec![0.5, 0.5]);
        for v in normalize_entropies(&[3.0, -1.0, 0.2, 9.4]) {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn sharpness_boundaries_and_monotone_threshold() {
        assert_eq!(classify_sharp(0.0, SHARP_MAX_ENTROPY), Sharpness::Sharp);
        assert_eq!(classify_sharp(0.38, SHARP_MAX_ENTROPY), Sharpness::Sharp);
        assert_eq!(classify_sharp(0.5, SHARP_MAX_ENTROPY), Sharpness::Neither);
        assert_eq!(classify_sharp(0.62, SHARP_MAX_ENTROPY), Sharpness::Diffuse);
        assert_eq!(classify_sharp(1.0, SHARP_MAX_ENTROPY), Sharpness::Diffuse);

        let mut rng = Rng::new(70);
        let norms: Vec<f64> = (0..40).map(|_| rng.next_f64()).collect();
        let mut last = 0usize;
        for step in 0..=20 {
            let thr = step as f64 / 40.0;
            let sharp = norms.iter().filter(|&&n| classify_sharp(n, thr) == Sharpness::Sharp).count();
            assert!(sharp >= last, "sharp count never drops as the threshold rises");
            last = sharp;
        }
    }

    #[test]
    fn orthogonal_heads_have_full_entropic_rank() {
        let loc = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0]];
        let (rank, scored, skipped) = entropic_rank_of_writes(&[loc.clone(), loc]).unwrap();
        assert!((rank - 2.0).abs() < 1e-9);
        assert_eq!((scored, skipped), (2, 0));
    }

    #[test]
    fn collinear_heads_have_rank_one() {
        let loc = vec![vec![1.0, 1.0, 0.0], vec![-2.0, -2.0, 0.0]];
        let (rank, _, _) = entropic_rank_of_writes(&[loc]).unwrap();
        assert!((rank - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_vectors_shrink_or_skip_locations() {
        let mixed = vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 5.0]];
        let only_two = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let e_mixed = location_spectrum_entropy(&mixed).unwrap().unwrap();
        let e_two = location_spectrum_entropy(&only_two).unwrap().unwrap();
        assert!((e_mixed - e_two).abs() < 1e-12, "zero head drops out of the Gram matrix");

        let dead = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        assert_eq!(location_spectrum_entropy(&dead).unwrap(), None);
        let (rank, scored, skipped) = entropic_rank_of_writes(&[dead.clone(), only_two]).unwrap();
        assert_eq!((scored, skipped), (1, 1));
        assert!((rank - 2.0).abs() < 1e-9);
        assert!(entropic_rank_of_writes(&[dead]).is_err());
    }

    /// Classical two-sided Jacobi eigenvalues for a small symmetric matrix,
    /// written independently of the production SVD.
    fn sym_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[p][q] * a[p][q];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i][i]).collect()
    }

    #[test]
    fn random_four_head_rank_matches_an_independent_spectrum_oracle() {
        let mut rng = Rng::new(71);
        for _ in 0..5 {
            let vectors: Vec<Vec<f64>> =
                (0..4).map(|_| (0..10).map(|_| rng.next_gaussian()).collect()).collect();

            let units: Vec<Vec<f64>> = vectors
                .iter()
                .map(|v| {
                    let n = norm2(v);
                    v.iter().map(|x| x / n).collect()
                })
                .collect();
            let gram: Vec<Vec<f64>> = (0..4)
                .map(|i| (0..4).map(|j| units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum()).collect())
                .collect();
            let mut eigs = sym_eigenvalues(gram);
            eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let w: Vec<f64> = eigs.iter().map(|&l| l.max(0.0).sqrt()).collect();
            let total: f64 = w.iter().sum();
            let expect: f64 = -w
                .iter()
                .map(|x| {
                    let p = x / total;
                    p * p.max(RANK_EPS).ln()
                })
                .sum::<f64>();

            let got = location_spectrum_entropy(&vectors).unwrap().unwrap();
            assert!((got - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn model_level_entropic_rank_stays_in_bounds() {
        let bundle = init_weights(&encdec_config(2), &mut Rng::new(72)).unwrap();
        let contexts = [context(20, 73), context(20, 74)];
        for kind in [AttnKind::SelfAttn, AttnKind::CrossAttn] {
            let r = entropic_rank(&bundle, &contexts, 1, kind).unwrap();
            assert!(r.rank >= 1.0 - 1e-12 && r.rank <= 2.0 + 1e-12);
            assert_eq!(r.locations_scored + r.locations_skipped, 2 * bundle.config.horizon);
        }

        let patch = init_weights(&patch_config(), &mut Rng::new(75)).unwrap();
        assert!(entropic_rank(&patch, &contexts, 0, AttnKind::SelfAttn).is_ok());
        assert!(matches!(
            entropic_rank(&patch, &contexts, 0, AttnKind::CrossAttn),
            Err(Error::UnsupportedArch { .. })
        ));
        assert!(entropic_rank(&bundle, &contexts, 9, AttnKind::SelfAttn).is_err());
    }

    #[test]
    fn prefix_score_fixtures() {
        // seq = a b a b a; the current tokens at steps 1.. are a, b, a, b.
        // Steps 1 and 2 see their token for the first time and are skipped;
        // step 3's token a recurs from position 0, step 4's b from position 1.
        let seq = [5u32, 9, 5, 9, 5];
        let onehot = |p: usize| {
            let mut row = vec![0.0; 6];
            row[p] = 1.0;
            row
        };
        let rows = vec![onehot(5), onehot(4), onehot(3), onehot(0), onehot(1)];
        assert_eq!(prefix_score(&seq, &rows), Some(1.0));

        let uniform = vec![vec![1.0 / 6.0; 6]; 5];
        let got = prefix_score(&seq, &uniform).unwrap();
        assert!((got - 1.0 / 6.0).abs() < 1e-15);

        // No token ever repeats: nothing to score.
        assert_eq!(prefix_score(&[1, 2, 3], &[vec![1.0], vec![1.0], vec![1.0]]), None);
    }

    #[test]
    fn rrt_probe_is_seeded_and_validated() {
        let bundle = init_weights(&encdec_config(2), &mut Rng::new(76)).unwrap();
        let a = rrt_test(&bundle, 7, 8, 3).unwrap();
        let b = rrt_test(&bundle, 7, 8, 3).unwrap();
        assert_eq!(a.sequence, b.sequence);
        assert_eq!(a.scores.len(), 4);
        for (sa, sb) in a.scores.iter().zip(&b.scores) {
            assert_eq!(sa.prefix_score, sb.prefix_score);
            assert_eq!(sa.copy_score, sb.copy_score);
            assert!((0.0..=1.0).contains(&sa.prefix_score));
            assert!(sa.copy_score.is_finite());
            assert_eq!(sa.induction, sa.prefix_score >= 0.3 && sa.copy_score >= 2.0);
        }
        let c = rrt_test(&bundle, 8, 8, 3).unwrap();
        assert_ne!(a.sequence, c.sequence);

        assert!(rrt_test(&bundle, 7, 40, 2).is_err(), "motif x repeats exceeds context");
        assert!(rrt_test(&bundle, 7, 8, 1).is_err());
        let patch = init_weights(&patch_config(), &mut Rng::new(77)).unwrap();
        assert!(matches!(rrt_test(&patch, 7, 4, 2), Err(Error::UnsupportedArch { .. })));
    }

    #[test]
    fn profiles_cover_heads_and_merge_probe_results() {
        let bundle = init_weights(&encdec_config(2), &mut Rng::new(78)).unwrap();
        let ctx = context(24, 79);
        let mut profiles = head_profiles(&bundle, &ctx).unwrap();
        assert_eq!(profiles.len(), 4);
        for p in &profiles {
            assert!((0.0..=1.0).contains(&p.normalized_entropy));
            assert_eq!(p.class, classify_sharp(p.normalized_entropy, SHARP_MAX_ENTROPY));
            assert_eq!(p.induction, None);
        }

        let probe = rrt_test(&bundle, 11, 8, 3).unwrap();
        apply_rrt(&mut profiles, &probe);
        for p in &profiles {
            assert!(p.prefix_score.is_some());
            assert!(p.induction.is_some());
        }
    }

    #[test]
    fn overlap_table_reproduces_the_reference_proportions() {
        // 144 heads: 12 induction, 10 sharp, 2 in both.
        let mut induction = vec![false; 144];
        let mut sharp = vec![false; 144];
        for i in 0..12 {
            induction[i] = true;
        }
        for s in 10..20 {
            sharp[s] = true;
        }
        let table = overlap_table(&induction, &sharp).unwrap();
        assert!((table.both - 2.0 / 144.0).abs() < 1e-15);
        assert!((table.p_induction - 12.0 / 144.0).abs() < 1e-15);
        assert!((table.p_sharp - 10.0 / 144.0).abs() < 1e-15);
        // Four-decimal table cells.
        assert_eq!(format!("{:.4}", table.both), "0.0139");
        assert_eq!(format!("{:.4}", table.p_induction), "0.0833");
        assert_eq!(format!("{:.4}", table.p_sharp), "0.0694");
        // Conditional overlap ratios.
        let p_s_i = table.p_sharp_given_induction.unwrap();
        let p_i_s = table.p_induction_given_sharp.unwrap();
        assert!((p_s_i - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(format!("{p_s_i:.4}"), "0.1667");
        assert!((p_i_s - 0.2).abs() < 1e-15);
        assert_eq!(format!("{p_i_s:.4}"), "0.2000");
        // Cells partition the head set.
        let sum = table.both + table.induction_only + table.sharp_only + table.neither;
        assert!((sum - 1.0).abs() < 1e-12);

        assert!(overlap_table(&[true], &[true, false]).is_err());
    }

    #[test]
    fn csv_exports_have_long_form_shapes() {
        let bundle = init_weights(&encdec_config(1), &mut Rng::new(80)).unwrap();
        let ctx = context(14, 81);
        let map = dla_logit_maps(&bundle, &ctx).unwrap();
        let csv = logit_map_csv(&map);
        let expect_rows = map.maps.len() * map.steps() * map.vocab();
        assert_eq!(csv.lines().count(), 1 + expect_rows);
        assert!(csv.starts_with("layer,step,token,prob\n"));

        let rollouts = attention_rollouts(&bundle, &ctx).unwrap();
        let csv = rollout_csv(&rollouts);
        let per = rollouts[0].matrix.rows() * rollouts[0].matrix.cols();
        assert_eq!(csv.lines().count(), 1 + rollouts.len() * per);
    }
}

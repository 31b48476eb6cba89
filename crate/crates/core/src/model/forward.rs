//! Inference: encoder pass, autoregressive decoding, and the ablation hooks.
//!
//! Decoding recomputes the full prefix every step rather than caching
//! key/value state. The models are small enough that the simplicity wins,
//! and every analysis pass sees exactly the same code path as plain
//! forecasting.

use crate::error::{Error, Result};
use crate::model::ablation::AblationPlan;
use crate::model::blocks::{gelu, rms_norm, rotary};
use crate::model::config::{Arch, HeadKind, ModelConfig, QUANTILE_LEVELS};
use crate::model::trace::{ForecastTrace, StepTrace};
use crate::model::weights::{AttnWeights, EmbedWeights, MlpWeights, ModelBundle};
use crate::numerics::{axpy, dot, softmax_in_place, vec_mat, Matrix, Rng};
use crate::synthdata::TimeSeries;
use crate::tokenize::{self, DECODER_START, EOS, VALUE_OFFSET};

/// How the next decoder token is chosen.
pub enum DecodePolicy<'a> {
    /// Highest-logit value token (special tokens are never emitted).
    Greedy,
    /// Sample from the softmax over value tokens.
    Sampled(&'a mut Rng),
    /// Feed a fixed token stream regardless of the logits (teacher forcing).
    Forced(&'a [u32]),
}

/// Result of a forecast.
pub struct ForecastOutput {
    pub forecast: TimeSeries,
    /// Per-step quantile values, `horizon x 9`, for quantile heads.
    pub quantiles: Option<QuantileForecast>,
    pub warnings: Vec<String>,
    pub trace: Option<ForecastTrace>,
}

pub struct QuantileForecast {
    pub levels: Vec<f64>,
    pub values: Matrix,
}

/// Result of raw token decoding.
pub struct TokenDecodeOutput {
    /// Tokens appended after the prefix, one per step.
    pub generated: Vec<u32>,
    pub trace: Option<ForecastTrace>,
}

/// Options controlling a forward run.
pub struct ForwardOptions<'a> {
    pub plan: &'a AblationPlan,
    pub want_trace: bool,
    pub policy: DecodePolicy<'a>,
    /// Run only the first `l` decoder layers and read the output map off the
    /// truncated stream. `None` runs the full stack.
    pub truncate_at: Option<usize>,
}

impl Default for ForwardOptions<'static> {
    fn default() -> Self {
        ForwardOptions {
            plan: AblationPlan::none(),
            want_trace: false,
            policy: DecodePolicy::Greedy,
            truncate_at: None,
        }
    }
}

impl<'a> ForwardOptions<'a> {
    pub fn with_plan(plan: &'a AblationPlan) -> Self {
        ForwardOptions { plan, ..ForwardOptions::default() }
    }

    pub fn traced() -> Self {
        ForwardOptions { want_trace: true, ..ForwardOptions::default() }
    }
}

/// Forecast `horizon` points following the first channel of `context`.
pub fn forecast(bundle: &ModelBundle, context: &TimeSeries, opts: ForwardOptions) -> Result<ForecastOutput> {
    let cfg = &bundle.config;
    cfg.validate()?;
    opts.plan.validate(cfg)?;
    check_truncation(cfg, opts.truncate_at)?;
    let raw = context.channel(0);
    let (values, mut warnings) = clip_context(&raw, cfg.context_len);
    match &cfg.arch {
        Arch::EncoderDecoder { tokenizer } => {
            let (scale, scaled) = tokenize::mean_scale(&values);
            let mut enc_tokens = tokenize::quantize(&scaled, tokenizer);
            enc_tokens.push(EOS);
            let out = decode_tokens(bundle, &enc_tokens, &[DECODER_START], cfg.horizon, scale, opts)?;
            let points = tokenize::dequantize(&out.generated, tokenizer, scale)?;
            Ok(ForecastOutput {
                forecast: TimeSeries::univariate(context.name.clone(), context.dt, points)?,
                quantiles: None,
                warnings,
                trace: out.trace,
            })
        }
        Arch::DecoderOnly { .. } => {
            let mut out = patch_forecast(bundle, &values, context, opts)?;
            warnings.append(&mut out.warnings);
            out.warnings = warnings;
            Ok(out)
        }
    }
}

/// Autoregressive decoding at the token level. The encoder input must
/// already be tokenized; `dec_prefix` seeds the decoder (usually just the
/// start token). Returns one generated token per step.
pub fn decode_tokens(
    bundle: &ModelBundle,
    enc_tokens: &[u32],
    dec_prefix: &[u32],
    steps: usize,
    scale: f64,
    opts: ForwardOptions,
) -> Result<TokenDecodeOutput> {
    let cfg = &bundle.config;
    let tokenizer = cfg
        .tokenizer()
        .ok_or(Error::UnsupportedArch { op: "decode_tokens", arch: cfg.arch_name().to_string() })?;
    opts.plan.validate(cfg)?;
    check_truncation(cfg, opts.truncate_at)?;
    let total = tokenizer.total_vocab() as u32;
    for &t in enc_tokens.iter().chain(dec_prefix) {
        if t >= total {
            return Err(Error::Config(format!("token {t} outside vocabulary of {total}")));
        }
    }
    if dec_prefix.is_empty() {
        return Err(Error::Config("decoder prefix must hold at least one token".into()));
    }
    if let DecodePolicy::Forced(stream) = &opts.policy {
        if stream.len() < steps {
            return Err(Error::Config(format!(
                "forced stream holds {} tokens but {steps} steps were requested",
                stream.len()
            )));
        }
    }

    let (enc_out, enc_attn) = encode(bundle, enc_tokens, opts.want_trace)?;
    let cross_kv: Vec<Vec<HeadKv>> = bundle
        .weights
        .decoder
        .iter()
        .map(|layer| {
            let attn = layer.cross_attn.as_ref().expect("validated encoder-decoder weights");
            project_kv(attn, &enc_out, 0.0)
        })
        .collect();

    let table = match &bundle.weights.embed {
        EmbedWeights::Tokens { table } => table,
        EmbedWeights::Patch { .. } => unreachable!("validated token embedding"),
    };
    let mut policy = opts.policy;
    let mut dec_tokens = dec_prefix.to_vec();
    let mut generated = Vec::with_capacity(steps);
    let mut step_traces = Vec::new();
    for step in 0..steps {
        let embedded: Vec<Vec<f64>> =
            dec_tokens.iter().map(|&t| table.row(t as usize).to_vec()).collect();
        let (logits, st) = decoder_pass(
            bundle,
            embedded,
            Some(&cross_kv),
            enc_tokens.len() as f64,
            opts.plan,
            opts.want_trace,
            opts.truncate_at,
        )?;
        let next = match &mut policy {
            DecodePolicy::Greedy => greedy_value_token(&logits, total),
            DecodePolicy::Sampled(rng) => sample_value_token(&logits, total, rng),
            DecodePolicy::Forced(stream) => stream[step],
        };
        if let Some(st) = st {
            step_traces.push(st);
        }
        dec_tokens.push(next);
        generated.push(next);
    }
    let trace = opts.want_trace.then(|| ForecastTrace {
        config: cfg.clone(),
        enc_tokens: enc_tokens.to_vec(),
        enc_attn,
        dec_tokens,
        steps: step_traces,
        scale,
        offset: 0.0,
    });
    Ok(TokenDecodeOutput { generated, trace })
}

fn patch_forecast(
    bundle: &ModelBundle,
    values: &[f64],
    context: &TimeSeries,
    opts: ForwardOptions,
) -> Result<ForecastOutput> {
    let cfg = &bundle.config;
    let patch_cfg = cfg.patch().expect("decoder-only config");
    let head = cfg.head_kind().expect("decoder-only config");
    let patches = tokenize::patchify(values, patch_cfg)?;
    let p = patch_cfg.patch_len;
    let n_steps = cfg.horizon.div_ceil(p);

    let (w_embed, b_embed) = match &bundle.weights.embed {
        EmbedWeights::Patch { w, b } => (w, b),
        EmbedWeights::Tokens { .. } => unreachable!("validated patch embedding"),
    };
    let mut patch_rows: Vec<Vec<f64>> =
        (0..patches.matrix.rows()).map(|i| patches.matrix.row(i).to_vec()).collect();
    let mut point_norm = Vec::with_capacity(n_steps * p);
    let mut quantile_norm: Vec<Vec<f64>> = vec![Vec::new(); QUANTILE_LEVELS.len()];
    let mut step_traces = Vec::new();
    for _ in 0..n_steps {
        let embedded: Vec<Vec<f64>> = patch_rows
            .iter()
            .map(|row| {
                let mut e = vec_mat(row, w_embed);
                for (x, b) in e.iter_mut().zip(b_embed) {
                    *x += b;
                }
                e
            })
            .collect();
        let (out, st) = decoder_pass(
            bundle,
            embedded,
            None,
            0.0,
            opts.plan,
            opts.want_trace,
            opts.truncate_at,
        )?;
        if let Some(st) = st {
            step_traces.push(st);
        }
        let next_patch: Vec<f64> = match head {
            HeadKind::Point => out.clone(),
            HeadKind::Quantile9 => {
                for (q, slot) in quantile_norm.iter_mut().enumerate() {
                    slot.extend_from_slice(&out[q * p..(q + 1) * p]);
                }
                let median = QUANTILE_LEVELS.iter().position(|&l| l == 0.5).expect("median level");
                out[median * p..(median + 1) * p].to_vec()
            }
        };
        point_norm.extend_from_slice(&next_patch);
        patch_rows.push(next_patch);
    }

    point_norm.truncate(cfg.horizon);
    let points: Vec<f64> = point_norm.iter().map(|x| x * patches.std + patches.mean).collect();
    let quantiles = match head {
        HeadKind::Point => None,
        HeadKind::Quantile9 => {
            let mut m = Matrix::zeros(cfg.horizon, QUANTILE_LEVELS.len());
            for (q, slot) in quantile_norm.iter().enumerate() {
                for t in 0..cfg.horizon {
                    m.set(t, q, slot[t] * patches.std + patches.mean);
                }
            }
            Some(QuantileForecast { levels: QUANTILE_LEVELS.to_vec(), values: m })
        }
    };
    let trace = opts.want_trace.then(|| ForecastTrace {
        config: cfg.clone(),
        enc_tokens: Vec::new(),
        enc_attn: Vec::new(),
        dec_tokens: Vec::new(),
        steps: step_traces,
        scale: patches.std,
        offset: patches.mean,
    });
    Ok(ForecastOutput {
        forecast: TimeSeries::univariate(context.name.clone(), context.dt, points)?,
        quantiles,
        warnings: Vec::new(),
        trace,
    })
}

/// One pass over the decoder stack for an already-embedded prefix.
/// Returns the output-map result at the last position.
fn decoder_pass(
    bundle: &ModelBundle,
    mut h: Vec<Vec<f64>>,
    cross_kv: Option<&Vec<Vec<HeadKv>>>,
    pos0: f64,
    plan: &AblationPlan,
    want_trace: bool,
    truncate_at: Option<usize>,
) -> Result<(Vec<f64>, Option<StepTrace>)> {
    let cfg = &bundle.config;
    let w = &bundle.weights;
    let layers_run = truncate_at.unwrap_or(cfg.layers);
    let last = h.len() - 1;

    let mut residuals = Vec::new();
    let mut self_rows = Vec::new();
    let mut cross_rows = Vec::new();
    let mut self_head_writes = Vec::new();
    let mut self_write = Vec::new();
    let mut cross_head_writes = Vec::new();
    let mut cross_write = Vec::new();
    if want_trace {
        residuals.push(h[last].clone());
    }

    for (li, layer) in w.decoder.iter().enumerate().take(layers_run) {
        let normed: Vec<Vec<f64>> = h.iter().map(|r| rms_norm(r, &layer.norm_self)).collect();
        let kv = project_kv(&layer.self_attn, &normed, pos0);
        let out = attention(
            &layer.self_attn,
            &normed,
            &kv,
            pos0,
            true,
            &|head| plan.ablates_self_head(li, head),
            want_trace,
            false,
        );
        for (row, write) in h.iter_mut().zip(&out.writes) {
            axpy(row, 1.0, write);
        }
        if want_trace {
            self_rows.push(out.rows_last);
            self_head_writes.push(out.head_writes_last);
            self_write.push(out.writes[last].clone());
        }

        if let (Some(attn), Some(gain), Some(kvs)) =
            (&layer.cross_attn, &layer.norm_cross, cross_kv)
        {
            let normed: Vec<Vec<f64>> = h.iter().map(|r| rms_norm(r, gain)).collect();
            let out = attention(
                attn,
                &normed,
                &kvs[li],
                pos0,
                false,
                &|head| plan.ablates_cross_head(li, head),
                want_trace,
                false,
            );
            for (row, write) in h.iter_mut().zip(&out.writes) {
                axpy(row, 1.0, write);
            }
            if want_trace {
                cross_rows.push(out.rows_last);
                cross_head_writes.push(out.head_writes_last);
                cross_write.push(out.writes[last].clone());
            }
        } else if want_trace {
            cross_rows.push(Vec::new());
            cross_head_writes.push(Vec::new());
            cross_write.push(Vec::new());
        }

        if !plan.ablates_mlp(li) {
            for row in h.iter_mut() {
                let normed = rms_norm(row, &layer.norm_mlp);
                let write = mlp_forward(&layer.mlp, &normed);
                axpy(row, 1.0, &write);
            }
        }
        if want_trace {
            residuals.push(h[last].clone());
        }
    }

    let pre_out = rms_norm(&h[last], &w.final_norm);
    let logits = vec_mat(&pre_out, &w.w_out);
    let st = want_trace.then(|| StepTrace {
        residuals,
        self_rows,
        cross_rows,
        self_head_writes,
        self_write,
        cross_head_writes,
        cross_write,
        pre_out,
        logits: logits.clone(),
    });
    Ok((logits, st))
}

/// Bidirectional encoder pass. Returns the normed encoder output rows and,
/// when asked, the full per-layer per-head attention matrices.
fn encode(
    bundle: &ModelBundle,
    tokens: &[u32],
    want_attn: bool,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Matrix>>)> {
    let w = &bundle.weights;
    let table = match &w.embed {
        EmbedWeights::Tokens { table } => table,
        EmbedWeights::Patch { .. } => unreachable!("validated token embedding"),
    };
    let mut h: Vec<Vec<f64>> = tokens.iter().map(|&t| table.row(t as usize).to_vec()).collect();
    let mut attn_trace = Vec::new();
    for layer in &w.encoder {
        let normed: Vec<Vec<f64>> = h.iter().map(|r| rms_norm(r, &layer.norm_self)).collect();
        let kv = project_kv(&layer.self_attn, &normed, 0.0);
        let out = attention(&layer.self_attn, &normed, &kv, 0.0, false, &|_| false, false, want_attn);
        for (row, write) in h.iter_mut().zip(&out.writes) {
            axpy(row, 1.0, write);
        }
        if want_attn {
            attn_trace.push(out.full.expect("requested full attention"));
        }
        for row in h.iter_mut() {
            let normed = rms_norm(row, &layer.norm_mlp);
            let write = mlp_forward(&layer.mlp, &normed);
            axpy(row, 1.0, &write);
        }
    }
    let gain = w.encoder_norm.as_ref().expect("validated encoder-decoder weights");
    let out = h.iter().map(|r| rms_norm(r, gain)).collect();
    Ok((out, attn_trace))
}

struct HeadKv {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Project key/value rows for every head, applying rotary positions
/// `pos0, pos0+1, ...` to the keys.
fn project_kv(attn: &AttnWeights, rows: &[Vec<f64>], pos0: f64) -> Vec<HeadKv> {
    attn.heads
        .iter()
        .map(|hw| {
            let k = rows
                .iter()
                .enumerate()
                .map(|(j, r)| {
                    let mut k = vec_mat(r, &hw.w_k);
                    rotary(&mut k, pos0 + j as f64);
                    k
                })
                .collect();
            let v = rows.iter().map(|r| vec_mat(r, &hw.w_v)).collect();
            HeadKv { k, v }
        })
        .collect()
}

struct AttnOut {
    /// Per query position, the summed residual write of all kept heads.
    writes: Vec<Vec<f64>>,
    /// Per head, the attention row of the last query position.
    rows_last: Vec<Vec<f64>>,
    /// Per head, the residual write at the last query position
    /// (zeros for ablated heads).
    head_writes_last: Vec<Vec<f64>>,
    /// Per head, the full attention matrix (`n_q x n_k`).
    full: Option<Vec<Matrix>>,
}

#[allow(clippy::too_many_arguments)]
fn attention(
    attn: &AttnWeights,
    queries_normed: &[Vec<f64>],
    kv: &[HeadKv],
    q_pos0: f64,
    causal: bool,
    ablated: &dyn Fn(usize) -> bool,
    want_last: bool,
    want_full: bool,
) -> AttnOut {
    let n_q = queries_normed.len();
    let d_head = attn.heads[0].w_q.cols();
    let d_model = attn.heads[0].w_o.cols();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut writes = vec![vec![0.0; d_model]; n_q];
    let mut rows_last = Vec::new();
    let mut head_writes_last = Vec::new();
    let mut full = want_full.then(Vec::new);
    for (hi, hw) in attn.heads.iter().enumerate() {
        let keep = !ablated(hi);
        let n_k = kv[hi].k.len();
        let mut full_m = want_full.then(|| Matrix::zeros(n_q, n_k));
        for (j, qrow) in queries_normed.iter().enumerate() {
            let mut q = vec_mat(qrow, &hw.w_q);
            rotary(&mut q, q_pos0 + j as f64);
            let limit = if causal { (j + 1).min(n_k) } else { n_k };
            let mut weights: Vec<f64> = (0..limit).map(|t| dot(&q, &kv[hi].k[t]) * scale).collect();
            softmax_in_place(&mut weights, 1.0);
            let mut pooled = vec![0.0; d_head];
            for (t, &a) in weights.iter().enumerate() {
                axpy(&mut pooled, a, &kv[hi].v[t]);
            }
            let write = vec_mat(&pooled, &hw.w_o);
            if keep {
                axpy(&mut writes[j], 1.0, &write);
            }
            if want_last && j == n_q - 1 {
                rows_last.push(weights.clone());
                head_writes_last.push(if keep { write } else { vec![0.0; d_model] });
            }
            if let Some(m) = full_m.as_mut() {
                for (t, &a) in weights.iter().enumerate() {
                    m.set(j, t, a);
                }
            }
        }
        if let (Some(fs), Some(m)) = (full.as_mut(), full_m) {
            fs.push(m);
        }
    }
    AttnOut { writes, rows_last, head_writes_last, full }
}

fn mlp_forward(mlp: &MlpWeights, x: &[f64]) -> Vec<f64> {
    let mut hidden = vec_mat(x, &mlp.w_in);
    for (h, b) in hidden.iter_mut().zip(&mlp.b_in) {
        *h = gelu(*h + b);
    }
    let mut out = vec_mat(&hidden, &mlp.w_out);
    for (o, b) in out.iter_mut().zip(&mlp.b_out) {
        *o += b;
    }
    out
}

fn greedy_value_token(logits: &[f64], total_vocab: u32) -> u32 {
    let mut best = VALUE_OFFSET;
    let mut best_logit = f64::NEG_INFINITY;
    for t in VALUE_OFFSET..total_vocab {
        let l = logits[t as usize];
        if l > best_logit {
            best_logit = l;
            best = t;
        }
    }
    best
}

fn sample_value_token(logits: &[f64], total_vocab: u32, rng: &mut Rng) -> u32 {
    let mut probs: Vec<f64> =
        (VALUE_OFFSET..total_vocab).map(|t| logits[t as usize]).collect();
    softmax_in_place(&mut probs, 1.0);
    let draw = rng.next_f64();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return VALUE_OFFSET + i as u32;
        }
    }
    total_vocab - 1
}

fn clip_context(values: &[f64], context_len: usize) -> (Vec<f64>, Vec<String>) {
    if values.len() > context_len {
        let dropped = values.len() - context_len;
        (
            values[dropped..].to_vec(),
            vec![format!(
                "context of {} points exceeds window of {context_len}; dropped {dropped} oldest points",
                values.len()
            )],
        )
    } else {
        (values.to_vec(), Vec::new())
    }
}

fn check_truncation(cfg: &ModelConfig, truncate_at: Option<usize>) -> Result<()> {
    match truncate_at {
        Some(l) if l > cfg.layers => Err(Error::Config(format!(
            "cannot truncate at layer {l}: model has {} layers",
            cfg.layers
        ))),
        _ => Ok(()),
    }
}

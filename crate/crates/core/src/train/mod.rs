//! Training: teacher-forced losses, analytic gradients, Adam, and a
//! finite-difference gradient checker.

mod graph;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{Arch, HeadKind, QUANTILE_LEVELS};
use crate::model::weights::{EmbedWeights, ModelBundle, ModelWeights};
use crate::numerics::{axpy, vec_mat, Rng};
use crate::tokenize::{self, DECODER_START, EOS};

use graph::{model_loss_grad, OutputTarget};

/// Step size for central differences.
pub const GRAD_CHECK_H: f64 = 1e-5;
/// Relative tolerance the analytic gradients are held to.
pub const GRAD_CHECK_TOL: f64 = 1e-4;
/// Relative errors are measured against at least this magnitude, so that
/// near-zero gradients compare against finite-difference noise fairly.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// One training example: a context window and the values right after it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainExample {
    pub context: Vec<f64>,
    pub target: Vec<f64>,
}

/// Training objective. Each one fits exactly one architecture/head pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Next-token cross entropy (token encoder-decoder).
    CrossEntropy,
    /// Next-patch mean squared error (patch decoder, point head).
    Mse,
    /// Next-patch pinball loss over nine levels (patch decoder, quantile head).
    Pinball,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Mse => "mse",
            LossKind::Pinball => "pinball",
        }
    }
}

fn check_loss_fits(bundle: &ModelBundle, loss: LossKind) -> Result<()> {
    let ok = match (&bundle.config.arch, loss) {
        (Arch::EncoderDecoder { .. }, LossKind::CrossEntropy) => true,
        (Arch::DecoderOnly { head: HeadKind::Point, .. }, LossKind::Mse) => true,
        (Arch::DecoderOnly { head: HeadKind::Quantile9, .. }, LossKind::Pinball) => true,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "loss {} does not fit the {} architecture",
            loss.name(),
            bundle.config.arch_name()
        )))
    }
}

/// Loss of one example; when `grads` is given, adds `weight` times the
/// gradient into it.
pub fn example_loss_grad(
    bundle: &ModelBundle,
    example: &TrainExample,
    loss: LossKind,
    mut grads: Option<&mut ModelWeights>,
    weight: f64,
) -> Result<f64> {
    check_loss_fits(bundle, loss)?;
    if example.context.is_empty() || example.target.is_empty() {
        return Err(Error::Config("training example needs context and target values".into()));
    }
    let cfg = &bundle.config;
    let w = &bundle.weights;
    let context = if example.context.len() > cfg.context_len {
        &example.context[example.context.len() - cfg.context_len..]
    } else {
        &example.context[..]
    };
    match &cfg.arch {
        Arch::EncoderDecoder { tokenizer } => {
            let (scale, scaled) = tokenize::mean_scale(context);
            let mut enc_tokens = tokenize::quantize(&scaled, tokenizer);
            enc_tokens.push(EOS);
            let scaled_target: Vec<f64> = example.target.iter().map(|v| v / scale).collect();
            let targets = tokenize::quantize(&scaled_target, tokenizer);
            let mut dec_input = vec![DECODER_START];
            dec_input.extend_from_slice(&targets[..targets.len() - 1]);

            let table = match &w.embed {
                EmbedWeights::Tokens { table } => table,
                EmbedWeights::Patch { .. } => unreachable!("validated token embedding"),
            };
            let dec_rows: Vec<Vec<f64>> =
                dec_input.iter().map(|&t| table.row(t as usize).to_vec()).collect();
            let (value, d_dec_in) = model_loss_grad(
                w,
                grads.as_deref_mut(),
                Some(&enc_tokens),
                dec_rows,
                enc_tokens.len() as f64,
                OutputTarget::Tokens(&targets),
                weight,
            );
            if let (Some(g), Some(d_in)) = (grads, d_dec_in) {
                let gtable = match &mut g.embed {
                    EmbedWeights::Tokens { table } => table,
                    EmbedWeights::Patch { .. } => unreachable!("validated token embedding"),
                };
                for (j, &t) in dec_input.iter().enumerate() {
                    axpy(gtable.row_mut(t as usize), 1.0, &d_in[j]);
                }
            }
            Ok(value)
        }
        Arch::DecoderOnly { patch, head } => {
            let p = patch.patch_len;
            if example.target.len() < p {
                return Err(Error::Config(format!(
                    "target of {} values is shorter than one patch of {p}",
                    example.target.len()
                )));
            }
            let patches = tokenize::patchify(context, patch)?;
            let mut rows: Vec<Vec<f64>> =
                (0..patches.matrix.rows()).map(|i| patches.matrix.row(i).to_vec()).collect();
            let usable = example.target.len() - example.target.len() % p;
            for chunk in example.target[..usable].chunks_exact(p) {
                rows.push(chunk.iter().map(|v| (v - patches.mean) / patches.std).collect());
            }
            let targets: Vec<Vec<f64>> = rows[1..].to_vec();
            let (we, be) = match &w.embed {
                EmbedWeights::Patch { w, b } => (w, b),
                EmbedWeights::Tokens { .. } => unreachable!("validated patch embedding"),
            };
            let dec_rows: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let mut e = vec_mat(r, we);
                    for (x, b) in e.iter_mut().zip(be) {
                        *x += b;
                    }
                    e
                })
                .collect();
            let (value, d_dec_in) = model_loss_grad(
                w,
                grads.as_deref_mut(),
                None,
                dec_rows,
                0.0,
                OutputTarget::Patches { targets: &targets, head: *head, levels: &QUANTILE_LEVELS },
                weight,
            );
            if let (Some(g), Some(d_in)) = (grads, d_dec_in) {
                let (gw, gb) = match &mut g.embed {
                    EmbedWeights::Patch { w, b } => (w, b),
                    EmbedWeights::Tokens { .. } => unreachable!("validated patch embedding"),
                };
                for (row, d) in rows.iter().zip(&d_in) {
                    graph::accumulate_outer(gw, row, d);
                    axpy(gb, 1.0, d);
                }
            }
            Ok(value)
        }
    }
}

/// Mean loss over a batch, gradients averaged into a fresh mirror.
pub fn batch_loss_and_grad(
    bundle: &ModelBundle,
    batch: &[&TrainExample],
    loss: LossKind,
) -> Result<(f64, ModelWeights)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut grads = bundle.weights.zeroed_like();
    let weight = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        total += example_loss_grad(bundle, ex, loss, Some(&mut grads), weight)? * weight;
    }
    Ok((total, grads))
}

/// Mean loss over a batch, forward only.
pub fn batch_loss(bundle: &ModelBundle, batch: &[&TrainExample], loss: LossKind) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        total += example_loss_grad(bundle, ex, loss, None, 1.0)?;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize, cfg: AdamConfig) -> Self {
        Self { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.t);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * g[i];
            self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            w[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    /// Seeds batch sampling.
    pub seed: u64,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_curve.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_curve.last().copied()
    }
}

/// Consecutive steps the loss may sit above ten times its starting value
/// before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Adam training loop with batch sampling, a full loss curve, and an abort
/// when the loss diverges or goes non-finite.
pub fn train(bundle: &mut ModelBundle, data: &[TrainExample], cfg: &TrainConfig) -> Result<TrainReport> {
    check_loss_fits(bundle, cfg.loss)?;
    if data.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut adam = Adam::new(bundle.weights.n_params(), cfg.adam);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut initial = f64::NAN;
    let mut streak = 0;
    for step in 0..cfg.steps {
        let batch: Vec<&TrainExample> =
            (0..cfg.batch_size).map(|_| &data[rng.next_below(data.len())]).collect();
        let (loss, grads) = batch_loss_and_grad(bundle, &batch, cfg.loss)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        curve.push(loss);
        if step == 0 {
            initial = loss;
        }
        if loss > 10.0 * initial.max(1e-12) {
            streak += 1;
            if streak >= DIVERGENCE_PATIENCE {
                return Err(Error::TrainingDiverged { step, curve });
            }
        } else {
            streak = 0;
        }
        let mut w = bundle.weights.flatten();
        adam.step(&mut w, &grads.flatten());
        bundle.weights.unflatten(&w)?;
    }
    Ok(TrainReport { loss_curve: curve })
}

/// Slices a value series into overlapping (context, target) windows.
pub fn make_windows(
    values: &[f64],
    context_len: usize,
    horizon: usize,
    stride: usize,
) -> Vec<TrainExample> {
    assert!(stride > 0, "stride must be positive");
    let window = context_len + horizon;
    if values.len() < window {
        return Vec::new();
    }
    (0..=values.len() - window)
        .step_by(stride)
        .map(|start| TrainExample {
            context: values[start..start + context_len].to_vec(),
            target: values[start + context_len..start + window].to_vec(),
        })
        .collect()
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Parameter with the worst error, as `tensor[index]`.
    pub worst_param: String,
    /// Worst relative error per tensor.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.max_rel_err <= GRAD_CHECK_TOL
    }
}

fn set_param(w: &mut ModelWeights, idx: usize, value: f64) {
    let mut off = 0;
    w.for_each_tensor_mut(&mut |_, t| {
        if idx >= off && idx < off + t.len() {
            t[idx - off] = value;
        }
        off += t.len();
    });
}

/// Checks analytic gradients against central finite differences.
/// `samples_per_tensor: None` checks every parameter.
pub fn check_gradients(
    bundle: &ModelBundle,
    batch: &[&TrainExample],
    loss: LossKind,
    samples_per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheck> {
    let (_, grads) = batch_loss_and_grad(bundle, batch, loss)?;
    let g_flat = grads.flatten();
    let base = bundle.weights.flatten();

    let mut layout: Vec<(String, usize)> = Vec::new();
    bundle.weights.for_each_tensor(&mut |name, t| layout.push((name, t.len())));

    let mut indices: Vec<usize> = Vec::new();
    let mut rng = Rng::new(seed);
    let mut off = 0;
    for (_, len) in &layout {
        match samples_per_tensor {
            None => indices.extend(off..off + len),
            Some(k) => {
                for _ in 0..k.min(*len) {
                    indices.push(off + rng.next_below(*len));
                }
            }
        }
        off += len;
    }

    let mut work = bundle.clone();
    let mut max_rel = 0.0_f64;
    let mut sum_rel = 0.0;
    let mut worst = String::new();
    let mut per_tensor: Vec<(String, f64)> = layout.iter().map(|(n, _)| (n.clone(), 0.0)).collect();
    for &idx in &indices {
        set_param(&mut work.weights, idx, base[idx] + GRAD_CHECK_H);
        let f_plus = batch_loss(&work, batch, loss)?;
        set_param(&mut work.weights, idx, base[idx] - GRAD_CHECK_H);
        let f_minus = batch_loss(&work, batch, loss)?;
        set_param(&mut work.weights, idx, base[idx]);
        let fd = (f_plus - f_minus) / (2.0 * GRAD_CHECK_H);
        let a = g_flat[idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        sum_rel += rel;
        let (tensor_pos, name) = locate(&layout, idx);
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{name}[{}]", idx - tensor_pos);
        }
        let slot = per_tensor.iter_mut().find(|(n, _)| n == &name).expect("tensor in layout");
        if rel > slot.1 {
            slot.1 = rel;
        }
    }
    Ok(GradCheck {
        checked: indices.len(),
        max_rel_err: max_rel,
        mean_rel_err: if indices.is_empty() { 0.0 } else { sum_rel / indices.len() as f64 },
        worst_param: worst,
        per_tensor,
    })
}

fn locate(layout: &[(String, usize)], idx: usize) -> (usize, String) {
    let mut off = 0;
    for (name, len) in layout {
        if idx < off + len {
            return (off, name.clone());
        }
        off += len;
    }
    unreachable!("index {idx} beyond parameter count");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{ModelConfig, NormKind};
    use crate::model::forward::{decode_tokens, DecodePolicy, ForwardOptions};
    use crate::model::weights::init_weights;
    use crate::numerics::Matrix;
    use crate::tokenize::{PatchConfig, PatchNorm, TokenizerConfig};

    fn micro_encdec(seed: u64) -> ModelBundle {
        let config = ModelConfig {
            arch: Arch::EncoderDecoder {
                tokenizer: TokenizerConfig { vocab_size: 16, range_low: -15.0, range_high: 15.0 },
            },
            layers: 1,
            heads: 2,
            d_model: 8,
            d_head: 4,
            d_ff: 16,
            context_len: 16,
            horizon: 4,
            norm: NormKind::RmsGain,
        };
        init_weights(&config, &mut Rng::new(seed)).unwrap()
    }

    fn micro_patch(head: HeadKind, seed: u64) -> ModelBundle {
        let config = ModelConfig {
            arch: Arch::DecoderOnly {
                patch: PatchConfig { patch_len: 4, normalization: PatchNorm::InstanceMeanStd },
                head,
            },
            layers: 1,
            heads: 2,
            d_model: 8,
            d_head: 4,
            d_ff: 16,
            context_len: 16,
            horizon: 8,
            norm: NormKind::RmsGain,
        };
        init_weights(&config, &mut Rng::new(seed)).unwrap()
    }

    fn examples(n: usize, len: usize, horizon: usize, seed: u64) -> Vec<TrainExample> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                let phase = rng.range_f64(0.0, 6.28);
                let series: Vec<f64> =
                    (0..len + horizon).map(|t| (t as f64 * 0.4 + phase).sin() * 2.0).collect();
                TrainExample {
                    context: series[..len].to_vec(),
                    target: series[len..].to_vec(),
                }
            })
            .collect()
    }

    #[test]
    fn zeroed_output_map_gives_uniform_cross_entropy() {
        let mut bundle = micro_encdec(5);
        bundle.weights.w_out = Matrix::zeros(8, 18);
        let data = examples(1, 12, 4, 9);
        let batch: Vec<&TrainExample> = data.iter().collect();
        let loss = batch_loss(&bundle, &batch, LossKind::CrossEntropy).unwrap();
        assert!((loss - (18.0_f64).ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn training_loss_agrees_with_the_inference_forward() {
        // cross entropy computed by the training pass must match the same
        // quantity read off a forced step-by-step decode, so the two forward
        // implementations cannot drift apart
        let bundle = micro_encdec(5);
        let tokenizer = bundle.config.tokenizer().unwrap().clone();
        let ex = &examples(1, 12, 4, 9)[0];
        let (scale, scaled) = tokenize::mean_scale(&ex.context);
        let mut enc = tokenize::quantize(&scaled, &tokenizer);
        enc.push(EOS);
        let scaled_target: Vec<f64> = ex.target.iter().map(|v| v / scale).collect();
        let targets = tokenize::quantize(&scaled_target, &tokenizer);

        let opts = ForwardOptions {
            want_trace: true,
            policy: DecodePolicy::Forced(&targets),
            ..ForwardOptions::default()
        };
        let decoded =
            decode_tokens(&bundle, &enc, &[DECODER_START], targets.len(), 1.0, opts).unwrap();
        let trace = decoded.trace.unwrap();
        let mut manual = 0.0;
        for (step, &y) in trace.steps.iter().zip(&targets) {
            let mut p = step.logits.clone();
            crate::numerics::softmax_in_place(&mut p, 1.0);
            manual -= p[y as usize].ln() / targets.len() as f64;
        }

        let batch = [ex];
        let trained = batch_loss(&bundle, &batch, LossKind::CrossEntropy).unwrap();
        assert!((trained - manual).abs() <= 1e-14, "{trained} vs {manual}");
    }

    #[test]
    fn analytic_gradients_match_finite_differences_for_cross_entropy() {
        let bundle = micro_encdec(5);
        let data = examples(2, 12, 4, 9);
        let batch: Vec<&TrainExample> = data.iter().collect();
        let check =
            check_gradients(&bundle, &batch, LossKind::CrossEntropy, None, 1).unwrap();
        assert_eq!(check.checked, bundle.weights.n_params());
        assert!(check.passes(), "max rel err {} at {}", check.max_rel_err, check.worst_param);
    }

    #[test]
    fn analytic_gradients_match_finite_differences_for_mse() {
        let bundle = micro_patch(HeadKind::Point, 6);
        let data = examples(2, 12, 8, 10);
        let batch: Vec<&TrainExample> = data.iter().collect();
        let check = check_gradients(&bundle, &batch, LossKind::Mse, None, 2).unwrap();
        assert!(check.passes(), "max rel err {} at {}", check.max_rel_err, check.worst_param);
    }

    #[test]
    fn analytic_gradients_match_finite_differences_for_pinball() {
        let bundle = micro_patch(HeadKind::Quantile9, 7);
        let data = examples(2, 12, 8, 11);
        let batch: Vec<&TrainExample> = data.iter().collect();
        let check = check_gradients(&bundle, &batch, LossKind::Pinball, None, 3).unwrap();
        assert!(check.passes(), "max rel err {} at {}", check.max_rel_err, check.worst_param);
    }

    #[test]
    fn a_head_with_zero_output_projection_gets_zero_query_key_value_grads() {
        let mut bundle = micro_encdec(5);
        {
            let head = &mut bundle.weights.decoder[0].self_attn.heads[1];
            head.w_o = Matrix::zeros(head.w_o.rows(), head.w_o.cols());
        }
        let data = examples(1, 12, 4, 9);
        let batch: Vec<&TrainExample> = data.iter().collect();
        let (_, grads) = batch_loss_and_grad(&bundle, &batch, LossKind::CrossEntropy).unwrap();
        let ghead = &grads.decoder[0].self_attn.heads[1];
        assert!(ghead.w_q.data().iter().all(|&g| g == 0.0));
        assert!(ghead.w_k.data().iter().all(|&g| g == 0.0));
        assert!(ghead.w_v.data().iter().all(|&g| g == 0.0));
        assert!(ghead.w_o.data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn training_reduces_cross_entropy_on_sinusoids() {
        let mut bundle = micro_encdec(5);
        let data = examples(16, 12, 4, 9);
        let cfg = TrainConfig {
            steps: 150,
            batch_size: 4,
            loss: LossKind::CrossEntropy,
            seed: 3,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
        };
        let report = train(&mut bundle, &data, &cfg).unwrap();
        let initial = report.initial_loss().unwrap();
        let last = report.final_loss().unwrap();
        assert!(last < initial - 0.5, "initial {initial}, final {last}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = examples(8, 12, 4, 9);
        let cfg = TrainConfig {
            steps: 10,
            batch_size: 2,
            loss: LossKind::CrossEntropy,
            seed: 3,
            adam: AdamConfig::default(),
        };
        let mut a = micro_encdec(5);
        let mut b = micro_encdec(5);
        let ra = train(&mut a, &data, &cfg).unwrap();
        let rb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ra.loss_curve, rb.loss_curve);
        assert_eq!(a.weights.flatten(), b.weights.flatten());

        let mut c = micro_encdec(5);
        let rc = train(&mut c, &data, &TrainConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(ra.loss_curve, rc.loss_curve);
    }

    #[test]
    fn zero_steps_changes_nothing() {
        let data = examples(4, 12, 4, 9);
        let cfg = TrainConfig {
            steps: 0,
            batch_size: 2,
            loss: LossKind::CrossEntropy,
            seed: 3,
            adam: AdamConfig::default(),
        };
        let mut bundle = micro_encdec(5);
        let before = bundle.weights.flatten();
        let report = train(&mut bundle, &data, &cfg).unwrap();
        assert!(report.loss_curve.is_empty());
        assert_eq!(bundle.weights.flatten(), before);
    }

    #[test]
    fn absurd_learning_rates_abort() {
        let data = examples(8, 12, 8, 9);
        let cfg = TrainConfig {
            steps: 400,
            batch_size: 2,
            loss: LossKind::Mse,
            seed: 3,
            adam: AdamConfig { lr: 50.0, ..AdamConfig::default() },
        };
        let mut bundle = micro_patch(HeadKind::Point, 6);
        match train(&mut bundle, &data, &cfg) {
            Err(Error::TrainingDiverged { step, curve }) => {
                assert!(step >= DIVERGENCE_PATIENCE);
                assert_eq!(curve.len(), step + 1);
            }
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected a divergence abort, got {other:?}"),
        }
    }

    #[test]
    fn loss_must_fit_the_architecture() {
        let bundle = micro_encdec(5);
        let data = examples(1, 12, 4, 9);
        let batch: Vec<&TrainExample> = data.iter().collect();
        assert!(matches!(
            batch_loss(&bundle, &batch, LossKind::Mse),
            Err(Error::Config(_))
        ));
        let patch = micro_patch(HeadKind::Point, 6);
        assert!(batch_loss(&patch, &batch, LossKind::Pinball).is_err());
        assert!(batch_loss(&patch, &batch, LossKind::CrossEntropy).is_err());
    }

    #[test]
    fn flatten_roundtrips_and_counts_parameters() {
        let bundle = micro_encdec(5);
        let flat = bundle.weights.flatten();
        assert_eq!(flat.len(), bundle.weights.n_params());
        let mut copy = bundle.weights.zeroed_like();
        assert!(copy.flatten().iter().all(|&x| x == 0.0));
        copy.unflatten(&flat).unwrap();
        assert_eq!(copy.flatten(), flat);
        assert!(copy.unflatten(&flat[1..]).is_err());

        // table 18x8 + enc(norms 2x8 + attn 2x4x(8x4) + mlp 8x16+16+16x8+8)
        // + enc_norm 8 + dec(enc sizes + cross norm 8 + cross attn 256)
        // + final 8 + w_out 8x18
        let enc_layer = 2 * 8 + 2 * 4 * 32 + (128 + 16 + 128 + 8);
        let dec_layer = enc_layer + 8 + 256;
        assert_eq!(
            bundle.weights.n_params(),
            18 * 8 + enc_layer + 8 + dec_layer + 8 + 18 * 8
        );
    }

    #[test]
    fn make_windows_slices_with_stride() {
        let values: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let w = make_windows(&values, 4, 2, 2);
        assert_eq!(w.len(), 3);
        assert_eq!(w[0].context, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(w[0].target, vec![4.0, 5.0]);
        assert_eq!(w[2].context, vec![4.0, 5.0, 6.0, 7.0]);
        assert!(make_windows(&values[..5], 4, 2, 1).is_empty());
    }
}

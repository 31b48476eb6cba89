//! Attention as kernel regression: the Gaussian Nadaraya-Watson reading of
//! softmax attention under equal key norms, the exact spectral tilt
//! factorization of attention weights, and a numerical verifier for the
//! concentration bound that ties attention sharpness to the top of a head's
//! singular spectrum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, mat_vec, norm2, softmax_in_place, svd, vec_mat, Matrix, Rng, SvdResult};

/// Spectral energy fraction captured by the default truncation rank.
pub const ENERGY_FRACTION: f64 = 0.9;

const SAMPLE_ATTEMPTS: usize = 200;

/// A query-key interaction matrix together with its spectral bookkeeping.
#[derive(Debug, Clone)]
pub struct SpectralHead {
    pub m: Matrix,
    pub svd: SvdResult,
    /// Frobenius-over-spectral energy ratio; `None` for a zero matrix.
    pub stable_rank: Option<f64>,
    /// Truncation rank, between 1 and the full dimension.
    pub r: usize,
    /// Tail energy: the sum of squared singular values past `r`.
    pub rho: f64,
}

impl SpectralHead {
    pub fn new(m: Matrix, r: usize) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::ShapeMismatch {
                op: "spectral_head",
                detail: format!("matrix is {}x{}, want square", m.rows(), m.cols()),
            });
        }
        let decomp = svd(&m)?;
        Self::assemble(m, decomp, r)
    }

    /// Picks the smallest rank whose leading singular values carry at least
    /// [`ENERGY_FRACTION`] of the total spectral energy.
    pub fn with_energy_rank(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::ShapeMismatch {
                op: "spectral_head",
                detail: format!("matrix is {}x{}, want square", m.rows(), m.cols()),
            });
        }
        let decomp = svd(&m)?;
        let r = energy_rank(&decomp.singular_values, ENERGY_FRACTION)?;
        Self::assemble(m, decomp, r)
    }

    /// Same matrix and decomposition at a different truncation rank.
    pub fn with_rank(&self, r: usize) -> Result<Self> {
        Self::assemble(self.m.clone(), self.svd.clone(), r)
    }

    fn assemble(m: Matrix, decomp: SvdResult, r: usize) -> Result<Self> {
        let n = m.rows();
        if r == 0 || r > n {
            return Err(Error::Config(format!("truncation rank {r} outside 1..={n}")));
        }
        let sv = &decomp.singular_values;
        let rho: f64 = sv[r..].iter().map(|s| s * s).sum();
        let total: f64 = sv.iter().map(|s| s * s).sum();
        let stable_rank = (sv[0] > 0.0).then(|| total / (sv[0] * sv[0]));
        Ok(SpectralHead { m, svd: decomp, stable_rank, r, rho })
    }

    pub fn n(&self) -> usize {
        self.m.rows()
    }

    /// Raw interaction score `<q, M k>`.
    pub fn score(&self, q: &[f64], k: &[f64]) -> f64 {
        dot(q, &mat_vec(&self.m, k))
    }

    /// Query in the left singular basis.
    pub fn query_features(&self, q: &[f64]) -> Vec<f64> {
        vec_mat(q, &self.svd.u)
    }

    /// Key in the right singular basis.
    pub fn key_features(&self, k: &[f64]) -> Vec<f64> {
        mat_vec(&self.svd.vt, k)
    }

    /// Score through the top-`r` modes only.
    pub fn truncated_score(&self, q: &[f64], k: &[f64]) -> f64 {
        let qf = self.query_features(q);
        let kf = self.key_features(k);
        (0..self.r).map(|d| self.svd.singular_values[d] * qf[d] * kf[d]).sum()
    }
}

/// Smallest rank whose cumulative squared singular values reach `fraction`
/// of the total.
pub fn energy_rank(singular_values: &[f64], fraction: f64) -> Result<usize> {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::Undefined { op: "energy_rank", detail: "zero spectrum".into() });
    }
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc >= fraction * total {
            return Ok(i + 1);
        }
    }
    Ok(singular_values.len())
}

fn check_key_dims(op: &'static str, q: &[f64], keys: &[Vec<f64>]) -> Result<()> {
    if keys.is_empty() {
        return Err(Error::Config(format!("{op} needs at least one key")));
    }
    if let Some(k) = keys.iter().find(|k| k.len() != q.len()) {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("query dim {} vs key dim {}", q.len(), k.len()),
        });
    }
    Ok(())
}

/// Gaussian kernel-regression weights: `w_i` proportional to
/// `exp(-|q - k_i|^2 / 2 tau)`, normalized over the keys.
pub fn nw_weights(q: &[f64], keys: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("bandwidth must be positive, got {tau}")));
    }
    check_key_dims("nw_weights", q, keys)?;
    let mut logits: Vec<f64> = keys
        .iter()
        .map(|k| {
            let d2: f64 = q.iter().zip(k).map(|(a, b)| (a - b) * (a - b)).sum();
            -d2 / (2.0 * tau)
        })
        .collect();
    softmax_in_place(&mut logits, 1.0);
    Ok(logits)
}

/// Scaled dot-product attention weights of one query over the keys.
pub fn attention_weights(q: &[f64], keys: &[Vec<f64>], d_head: usize) -> Result<Vec<f64>> {
    if d_head == 0 {
        return Err(Error::Config("d_head must be positive".into()));
    }
    check_key_dims("attention_weights", q, keys)?;
    let tau = (d_head as f64).sqrt();
    let mut logits: Vec<f64> = keys.iter().map(|k| dot(q, k) / tau).collect();
    softmax_in_place(&mut logits, 1.0);
    Ok(logits)
}

/// Largest pointwise gap between dot-product attention and the Gaussian
/// kernel weights at bandwidth sqrt(d_head). Zero (to roundoff) when every
/// key has the same norm; reported but meaningless otherwise.
pub fn attention_vs_nw(q: &[f64], keys: &[Vec<f64>], d_head: usize) -> Result<f64> {
    let attn = attention_weights(q, keys, d_head)?;
    let nw = nw_weights(q, keys, (d_head as f64).sqrt())?;
    Ok(attn.iter().zip(&nw).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Rescales every key onto the sphere of the given radius.
pub fn rescale_to_norm(keys: &[Vec<f64>], radius: f64) -> Result<Vec<Vec<f64>>> {
    keys.iter()
        .map(|k| {
            let n = norm2(k);
            if n == 0.0 {
                return Err(Error::Undefined {
                    op: "rescale_to_norm",
                    detail: "zero key cannot be put on a sphere".into(),
                });
            }
            Ok(k.iter().map(|x| x * radius / n).collect())
        })
        .collect()
}

/// Attention weights rewritten in the singular bases of the head: a
/// Gaussian kernel over the projected query-key difference, bandwidth set
/// per direction by the singular values, times a key tilt. Equal to the
/// softmax of the raw scores `<h_q, M h_i>` up to roundoff; the query's own
/// seminorm cancels row-wise.
pub fn tilt_factorization(head: &SpectralHead, h_q: &[f64], h_keys: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_key_dims("tilt_factorization", h_q, h_keys)?;
    if h_q.len() != head.n() {
        return Err(Error::ShapeMismatch {
            op: "tilt_factorization",
            detail: format!("vectors of dim {} against a {} head", h_q.len(), head.n()),
        });
    }
    let sv = &head.svd.singular_values;
    let qf = head.query_features(h_q);
    let mut logits: Vec<f64> = h_keys
        .iter()
        .map(|k| {
            let kf = head.key_features(k);
            let tilt: f64 = sv.iter().zip(&kf).map(|(s, x)| s * x * x).sum();
            let gauss: f64 = sv
                .iter()
                .zip(qf.iter().zip(&kf))
                .map(|(s, (a, b))| s * (a - b) * (a - b))
                .sum();
            0.5 * tilt - 0.5 * gauss
        })
        .collect();
    softmax_in_place(&mut logits, 1.0);
    Ok(logits)
}

/// Log of the attention mass a softmax row leaves off its chosen column:
/// `ln(1 - A[j_star])` for the softmax of `beta * scores`. Computed fully
/// in log space so very large `beta` cannot underflow.
pub fn log_residual_mass(scores: &[f64], j_star: usize, beta: f64) -> f64 {
    let ex_max = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != j_star)
        .map(|(_, &s)| beta * s)
        .fold(f64::NEG_INFINITY, f64::max);
    let ex_sum: f64 = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != j_star)
        .map(|(_, &s)| (beta * s - ex_max).exp())
        .sum();
    let all_max = ex_max.max(beta * scores[j_star]);
    let all_sum: f64 = scores.iter().map(|&s| (beta * s - all_max).exp()).sum();
    (ex_max + ex_sum.ln()) - (all_max + all_sum.ln())
}

/// Residual attention mass against the gap bound `(C-1) exp(-beta gamma)`,
/// where `gamma` is the top-2 score gap. Needs nothing but a strict argmax;
/// `None` when the two largest scores tie.
pub fn generic_residual_bound(scores: &[f64], beta: f64) -> Option<(f64, f64)> {
    if scores.len() < 2 {
        return None;
    }
    let (j_star, _) = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    let runner_up = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != j_star)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let gamma = scores[j_star] - runner_up;
    if gamma <= 0.0 {
        return None;
    }
    let lhs = log_residual_mass(scores, j_star, beta).exp();
    let rhs = (scores.len() - 1) as f64 * (-beta * gamma).exp();
    Some((lhs, rhs))
}

/// A fixed attention problem: one head, a set of decoder queries, a set of
/// encoder keys, and an inverse temperature.
#[derive(Debug, Clone)]
pub struct BoundInstance {
    pub head: SpectralHead,
    pub queries: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub beta: f64,
    pub seed: u64,
}

impl BoundInstance {
    pub fn new(
        head: SpectralHead,
        queries: Vec<Vec<f64>>,
        keys: Vec<Vec<f64>>,
        beta: f64,
        seed: u64,
    ) -> Result<Self> {
        if beta <= 0.0 {
            return Err(Error::Config(format!("inverse temperature must be positive, got {beta}")));
        }
        if queries.is_empty() || keys.len() < 2 {
            return Err(Error::Config("need at least one query and two keys".into()));
        }
        let n = head.n();
        if queries.iter().chain(&keys).any(|v| v.len() != n) {
            return Err(Error::ShapeMismatch {
                op: "bound_instance",
                detail: format!("all vectors must have the head dimension {n}"),
            });
        }
        Ok(BoundInstance { head, queries, keys, beta, seed })
    }

    pub fn max_query_norm(&self) -> f64 {
        self.queries.iter().map(|q| norm2(q)).fold(0.0, f64::max)
    }

    pub fn max_key_norm(&self) -> f64 {
        self.keys.iter().map(|k| norm2(k)).fold(0.0, f64::max)
    }
}

/// The measurable hypotheses of the concentration bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assumption {
    /// (i) a strictly unique best truncated score.
    ScoreMargin,
    /// (ii) the top two keys are separated in the truncated basis.
    KeySeparation,
    /// (iii) the weighted query points toward the top key's side.
    AlignmentSeparation,
    /// The margin exceeds twice the tail-energy perturbation.
    MarginCondition,
}

impl std::fmt::Display for Assumption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Assumption::ScoreMargin => "(i) score margin",
            Assumption::KeySeparation => "(ii) key separation",
            Assumption::AlignmentSeparation => "(iii) alignment separation",
            Assumption::MarginCondition => "margin above the spectral tail",
        };
        f.write_str(s)
    }
}

/// Everything measured while checking the bound for one query.
#[derive(Debug, Clone, Serialize)]
pub struct QueryCheck {
    pub j_star: usize,
    pub j_dagger: usize,
    /// Top-2 gap of the truncated scores.
    pub margin_truncated: f64,
    /// Top-2 gap of the full scores, relative to the truncated argmax.
    pub margin_full: f64,
    /// Distance between the top two keys in the truncated basis.
    pub separation: f64,
    /// Cosine between the weighted query and the key difference.
    pub alignment: f64,
    /// Exact residual mass `1 - A[j_star]` of the full-score softmax.
    pub lhs: f64,
    pub rhs_generic: f64,
    pub rhs_truncated: f64,
    pub slack: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryVerdict {
    pub query: usize,
    pub assumptions_ok: bool,
    pub failed: Vec<Assumption>,
    pub check: Option<QueryCheck>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub seed: u64,
    pub r: usize,
    pub rho: f64,
    pub beta: f64,
    pub max_query_norm: f64,
    pub max_key_norm: f64,
    pub queries: Vec<QueryVerdict>,
}

impl BoundReport {
    pub fn all_assumptions_ok(&self) -> bool {
        self.queries.iter().all(|v| v.assumptions_ok)
    }

    pub fn violations(&self) -> usize {
        self.queries
            .iter()
            .filter_map(|v| v.check.as_ref())
            .filter(|c| !c.holds)
            .count()
    }

    pub fn min_slack(&self) -> Option<f64> {
        self.queries
            .iter()
            .filter_map(|v| v.check.as_ref())
            .map(|c| c.slack)
            .min_by(f64::total_cmp)
    }
}

/// Checks the concentration bound on every query of the instance. Each
/// query first gets its hypotheses verified on the realized numbers; only
/// then is the exact softmax residual compared against both the gap bound
/// and the truncated-spectrum bound. Queries whose hypotheses fail report
/// which ones and carry no verdict.
pub fn verify_bound(inst: &BoundInstance) -> Result<BoundReport> {
    let head = &inst.head;
    let sv = &head.svd.singular_values;
    let r = head.r;
    let c = inst.keys.len();
    let m_q = inst.max_query_norm();
    let m_k = inst.max_key_norm();
    let tail_term = 2.0 * head.rho.sqrt() * m_q * m_k;

    let key_feats: Vec<Vec<f64>> = inst.keys.iter().map(|k| head.key_features(k)).collect();
    let mut verdicts = Vec::with_capacity(inst.queries.len());
    for (qi, q) in inst.queries.iter().enumerate() {
        let qf = head.query_features(q);
        let weighted_q: Vec<f64> = (0..r).map(|d| sv[d] * qf[d]).collect();
        let truncated: Vec<f64> = key_feats
            .iter()
            .map(|kf| (0..r).map(|d| weighted_q[d] * kf[d]).sum())
            .collect();
        let full: Vec<f64> = inst.keys.iter().map(|k| head.score(q, k)).collect();

        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| truncated[b].total_cmp(&truncated[a]));
        let (j_star, j_dagger) = (order[0], order[1]);
        let margin_truncated = truncated[j_star] - truncated[j_dagger];
        let delta: Vec<f64> = (0..r)
            .map(|d| key_feats[j_star][d] - key_feats[j_dagger][d])
            .collect();
        let separation = norm2(&delta);
        let weighted_norm = norm2(&weighted_q);
        let alignment = if separation > 0.0 && weighted_norm > 0.0 {
            dot(&weighted_q, &delta) / (weighted_norm * separation)
        } else {
            0.0
        };

        let mut failed = Vec::new();
        if margin_truncated <= 0.0 {
            failed.push(Assumption::ScoreMargin);
        }
        if separation <= 0.0 {
            failed.push(Assumption::KeySeparation);
        }
        if alignment <= 0.0 {
            failed.push(Assumption::AlignmentSeparation);
        }
        if margin_truncated <= tail_term {
            failed.push(Assumption::MarginCondition);
        }
        if !failed.is_empty() {
            verdicts.push(QueryVerdict { query: qi, assumptions_ok: false, failed, check: None });
            continue;
        }

        let ln_lhs = log_residual_mass(&full, j_star, inst.beta);
        let margin_full = full[j_star]
            - full
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != j_star)
                .map(|(_, &s)| s)
                .fold(f64::NEG_INFINITY, f64::max);
        let ln_count = (c - 1) as f64;
        let ln_rhs_generic = ln_count.ln() - inst.beta * margin_full;
        let exponent = alignment * separation * weighted_norm - tail_term;
        let ln_rhs_truncated = ln_count.ln() - inst.beta * exponent;
        let holds = ln_lhs <= ln_rhs_generic && ln_lhs <= ln_rhs_truncated;
        let lhs = ln_lhs.exp();
        let rhs_generic = ln_rhs_generic.exp();
        let rhs_truncated = ln_rhs_truncated.exp();
        verdicts.push(QueryVerdict {
            query: qi,
            assumptions_ok: true,
            failed: Vec::new(),
            check: Some(QueryCheck {
                j_star,
                j_dagger,
                margin_truncated,
                margin_full,
                separation,
                alignment,
                lhs,
                rhs_generic,
                rhs_truncated,
                slack: rhs_generic.min(rhs_truncated) - lhs,
                holds,
            }),
        });
    }
    Ok(BoundReport {
        seed: inst.seed,
        r,
        rho: head.rho,
        beta: inst.beta,
        max_query_norm: m_q,
        max_key_norm: m_k,
        queries: verdicts,
    })
}

/// Instance families for the verification suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceFamily {
    /// Full truncation rank, so the tail energy is exactly zero.
    ZeroTail,
    /// Rapidly decaying spectrum truncated at the 90%-energy rank, leaving
    /// a measured positive tail.
    MeasuredTail,
}

impl InstanceFamily {
    pub fn label(self) -> &'static str {
        match self {
            InstanceFamily::ZeroTail => "zero_tail",
            InstanceFamily::MeasuredTail => "measured_tail",
        }
    }
}

fn unit_gaussian(n: usize, rng: &mut Rng) -> Option<Vec<f64>> {
    let v: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
    let norm = norm2(&v);
    (norm > 0.0).then(|| v.iter().map(|x| x / norm).collect())
}

/// Draws a random instance whose realized numbers satisfy the bound's
/// hypotheses: keys on the unit sphere with one pulled toward the query's
/// preferred key direction, then every quantity re-measured from what was
/// actually drawn. Resamples until the measured hypotheses hold.
pub fn sample_instance(seed: u64, family: InstanceFamily) -> Result<BoundInstance> {
    for attempt in 0..SAMPLE_ATTEMPTS {
        let stream = seed.wrapping_add((attempt as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let mut rng = Rng::new(stream);
        let n = 4 + rng.next_below(9);
        let c = 3 + rng.next_below(14);
        let beta = rng.range_f64(0.5, 4.0);

        let raw = Matrix::gaussian(n, n, 1.0, &mut rng);
        let head = match family {
            InstanceFamily::ZeroTail => SpectralHead::new(raw, n)?,
            InstanceFamily::MeasuredTail => {
                let decomp = svd(&raw)?;
                let mut scaled = Matrix::zeros(n, n);
                for i in 0..n {
                    for d in 0..n {
                        scaled.set(i, d, decomp.u.get(i, d) * 3.0 * 0.05f64.powi(d as i32));
                    }
                }
                SpectralHead::with_energy_rank(scaled.matmul(&decomp.vt)?)?
            }
        };

        let Some(q) = unit_gaussian(n, &mut rng) else { continue };
        let mut keys: Vec<Vec<f64>> = Vec::with_capacity(c);
        for _ in 0..c {
            match unit_gaussian(n, &mut rng) {
                Some(k) => keys.push(k),
                None => break,
            }
        }
        if keys.len() < c {
            continue;
        }
        // The score <q, M k> is maximized over unit keys at k along M^T q;
        // blend the first key toward that direction to manufacture a margin.
        let pull = vec_mat(&q, &head.m);
        let pull_norm = norm2(&pull);
        if pull_norm == 0.0 {
            continue;
        }
        let alpha = rng.range_f64(0.85, 0.98);
        let blended: Vec<f64> = keys[0]
            .iter()
            .zip(&pull)
            .map(|(k, p)| (1.0 - alpha) * k + alpha * p / pull_norm)
            .collect();
        let blended_norm = norm2(&blended);
        if blended_norm == 0.0 {
            continue;
        }
        keys[0] = blended.iter().map(|x| x / blended_norm).collect();

        let inst = BoundInstance::new(head, vec![q], keys, beta, seed)?;
        if verify_bound(&inst)?.all_assumptions_ok() {
            return Ok(inst);
        }
    }
    Err(Error::Config(format!(
        "no hypothesis-satisfying {} instance within {SAMPLE_ATTEMPTS} draws of seed {seed}",
        family.label()
    )))
}

/// Result of comparing asymptotic decay rates in beta.
#[derive(Debug, Clone, Serialize)]
pub struct SlopeCheck {
    pub slope_lhs: f64,
    pub slope_rhs: f64,
    pub ok: bool,
}

fn lsq_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

/// Fits the log decay of the exact residual mass over a grid of large
/// inverse temperatures and compares it with the bound's exact rate. The
/// residual must decay at least as fast, up to a small fitting tolerance.
pub fn log_slope_check(inst: &BoundInstance) -> Result<SlopeCheck> {
    let report = verify_bound(inst)?;
    let verdict = report.queries.iter().find(|v| v.check.is_some()).ok_or(Error::Undefined {
        op: "log_slope_check",
        detail: "no query passed the hypothesis checks".into(),
    })?;
    let check = verdict.check.as_ref().expect("filtered on presence");
    let q = &inst.queries[verdict.query];
    let full: Vec<f64> = inst.keys.iter().map(|k| inst.head.score(q, k)).collect();
    let gamma = check.margin_full;
    if gamma <= 0.0 {
        return Err(Error::Undefined {
            op: "log_slope_check",
            detail: "non-positive full-score margin".into(),
        });
    }
    let tail_term = 2.0 * inst.head.rho.sqrt() * inst.max_query_norm() * inst.max_key_norm();
    let rate = check.margin_truncated - tail_term;

    let betas: Vec<f64> = (0..6).map(|i| (15.0 + 5.0 * i as f64) / gamma).collect();
    let ln_lhs: Vec<f64> = betas.iter().map(|&b| log_residual_mass(&full, check.j_star, b)).collect();
    let slope_lhs = lsq_slope(&betas, &ln_lhs);
    let slope_rhs = -rate;
    let ok = slope_lhs <= slope_rhs + 1e-3 * slope_rhs.abs() + 1e-12;
    Ok(SlopeCheck { slope_lhs, slope_rhs, ok })
}

/// One suite instance in the verification report.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteRow {
    pub seed: u64,
    pub family: &'static str,
    pub r: usize,
    pub rho: f64,
    pub lhs: f64,
    pub rhs_generic: f64,
    pub rhs_truncated: f64,
    pub slack: f64,
    pub assumptions_ok: bool,
}

/// Aggregate result of the randomized bound-verification suite.
#[derive(Debug, Clone, Serialize)]
pub struct BoundSuite {
    pub instances: usize,
    pub violations: usize,
    /// Extra checks from sweeping every other truncation rank per instance.
    pub rank_sweep_checks: usize,
    pub rank_sweep_violations: usize,
    pub rows: Vec<SuiteRow>,
}

impl BoundSuite {
    pub fn all_pass(&self) -> bool {
        self.violations == 0 && self.rank_sweep_violations == 0
    }
}

/// Generates `count` hypothesis-verified instances, alternating the
/// zero-tail and measured-tail families, and checks the bound on each plus
/// every other truncation rank whose hypotheses still hold.
pub fn run_bound_suite(count: usize, base_seed: u64) -> Result<BoundSuite> {
    let results: Vec<(SuiteRow, bool, usize, usize)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let family = if i % 2 == 0 { InstanceFamily::ZeroTail } else { InstanceFamily::MeasuredTail };
            let inst = sample_instance(base_seed.wrapping_add(i as u64), family)?;
            let report = verify_bound(&inst)?;
            let check = report
                .queries
                .iter()
                .find_map(|v| v.check.as_ref())
                .expect("sampled instances satisfy the hypotheses");
            let row = SuiteRow {
                seed: inst.seed,
                family: family.label(),
                r: inst.head.r,
                rho: inst.head.rho,
                lhs: check.lhs,
                rhs_generic: check.rhs_generic,
                rhs_truncated: check.rhs_truncated,
                slack: check.slack,
                assumptions_ok: report.all_assumptions_ok(),
            };

            let mut sweep_checks = 0;
            let mut sweep_violations = 0;
            for r in 1..=inst.head.n() {
                if r == inst.head.r {
                    continue;
                }
                let swept = BoundInstance::new(
                    inst.head.with_rank(r)?,
                    inst.queries.clone(),
                    inst.keys.clone(),
                    inst.beta,
                    inst.seed,
                )?;
                for verdict in verify_bound(&swept)?.queries {
                    if let Some(c) = verdict.check {
                        sweep_checks += 1;
                        if !c.holds {
                            sweep_violations += 1;
                        }
                    }
                }
            }
            Ok((row, check.holds, sweep_checks, sweep_violations))
        })
        .collect::<Result<_>>()?;

    let mut suite = BoundSuite {
        instances: count,
        violations: 0,
        rank_sweep_checks: 0,
        rank_sweep_violations: 0,
        rows: Vec::with_capacity(count),
    };
    for (row, holds, sweep_checks, sweep_violations) in results {
        if !holds {
            suite.violations += 1;
        }
        suite.rank_sweep_checks += sweep_checks;
        suite.rank_sweep_violations += sweep_violations;
        suite.rows.push(row);
    }
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_head(seed: u64, n: usize, r: usize) -> SpectralHead {
        let mut rng = Rng::new(seed);
        SpectralHead::new(Matrix::gaussian(n, n, 1.0, &mut rng), r).unwrap()
    }

    #[test]
    fn tail_energy_matches_the_truncation_residual() {
        for seed in 0..5 {
            let head = random_head(seed, 6, 1);
            for r in 1..=6 {
                let head = head.with_rank(r).unwrap();
                // Rebuild the rank-r matrix and measure what was cut off.
                let n = head.n();
                let mut scaled = Matrix::zeros(n, n);
                for i in 0..n {
                    for d in 0..r {
                        scaled.set(i, d, head.svd.u.get(i, d) * head.svd.singular_values[d]);
                    }
                }
                let m_r = scaled.matmul(&head.svd.vt).unwrap();
                let mut resid = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let d = head.m.get(i, j) - m_r.get(i, j);
                        resid += d * d;
                    }
                }
                assert!((head.rho - resid).abs() < 1e-10, "r={r}: {} vs {resid}", head.rho);
            }
            assert_eq!(head.with_rank(6).unwrap().rho, 0.0);
        }
    }

    #[test]
    fn energy_rank_takes_the_smallest_sufficient_cut() {
        assert_eq!(energy_rank(&[3.0, 1.0, 0.1], 0.9).unwrap(), 2);
        assert_eq!(energy_rank(&[3.0, 1.0, 0.1], 0.9999).unwrap(), 3);
        assert_eq!(energy_rank(&[5.0], 0.9).unwrap(), 1);
        assert!(energy_rank(&[0.0, 0.0], 0.9).is_err());

        let head = random_head(3, 5, 1);
        let picked = SpectralHead::with_energy_rank(head.m.clone()).unwrap();
        let sv = &picked.svd.singular_values;
        assert_eq!(picked.r, energy_rank(sv, ENERGY_FRACTION).unwrap());

        assert!(head.with_rank(0).is_err());
        assert!(head.with_rank(6).is_err());
        assert!(SpectralHead::new(Matrix::zeros(2, 3), 1).is_err());
    }

    #[test]
    fn stable_rank_field_matches_the_production_routine() {
        for seed in 10..14 {
            let head = random_head(seed, 5, 2);
            let direct = crate::numerics::stable_rank(&head.m).unwrap();
            assert!((head.stable_rank.unwrap() - direct).abs() < 1e-9);
        }
        let zero = SpectralHead::new(Matrix::zeros(3, 3), 3).unwrap();
        assert_eq!(zero.stable_rank, None);
        assert_eq!(zero.rho, 0.0);
    }

    #[test]
    fn nw_weight_fixtures() {
        // Equidistant keys split the mass exactly in half.
        let q = vec![0.0, 0.0];
        let keys = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert_eq!(nw_weights(&q, &keys, 2.0).unwrap(), vec![0.5, 0.5]);

        // Sitting on one key: the winner takes the analytic share.
        let q = vec![1.0, 0.0];
        let keys = vec![vec![1.0, 0.0], vec![11.0, 0.0]];
        let w = nw_weights(&q, &keys, 2.0).unwrap();
        let expect = 1.0 / (1.0 + (-100.0 / 4.0f64).exp());
        assert!((w[0] - expect).abs() < 1e-12);
        assert!(w[0] > 0.99999);

        // Random case against the formula applied directly.
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let q: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
            let keys: Vec<Vec<f64>> =
                (0..6).map(|_| (0..4).map(|_| rng.next_gaussian()).collect()).collect();
            let tau = rng.range_f64(0.5, 3.0);
            let got = nw_weights(&q, &keys, tau).unwrap();
            let raw: Vec<f64> = keys
                .iter()
                .map(|k| {
                    let d2: f64 = q.iter().zip(k).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-d2 / (2.0 * tau)).exp()
                })
                .collect();
            let z: f64 = raw.iter().sum();
            for (g, r) in got.iter().zip(&raw) {
                assert!((g - r / z).abs() < 1e-12);
            }
        }

        assert!(nw_weights(&q, &keys, 0.0).is_err());
        assert!(nw_weights(&q, &[], 1.0).is_err());
    }

    #[test]
    fn nw_weights_ignore_a_common_offset() {
        let mut rng = Rng::new(22);
        for _ in 0..10 {
            let q: Vec<f64> = (0..5).map(|_| rng.next_gaussian()).collect();
            let keys: Vec<Vec<f64>> =
                (0..7).map(|_| (0..5).map(|_| rng.next_gaussian()).collect()).collect();
            let offset: Vec<f64> = (0..5).map(|_| 10.0 * rng.next_gaussian()).collect();
            let base = nw_weights(&q, &keys, 1.5).unwrap();
            let q2: Vec<f64> = q.iter().zip(&offset).map(|(a, b)| a + b).collect();
            let keys2: Vec<Vec<f64>> = keys
                .iter()
                .map(|k| k.iter().zip(&offset).map(|(a, b)| a + b).collect())
                .collect();
            let shifted = nw_weights(&q2, &keys2, 1.5).unwrap();
            for (a, b) in base.iter().zip(&shifted) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn attention_equals_nw_on_the_sphere() {
        let mut rng = Rng::new(23);
        for case in 0..50 {
            let d = 2 + rng.next_below(7);
            let q: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
            let raw: Vec<Vec<f64>> =
                (0..5).map(|_| (0..d).map(|_| rng.next_gaussian()).collect()).collect();
            let keys = rescale_to_norm(&raw, 1.7).unwrap();
            let dev = attention_vs_nw(&q, &keys, d).unwrap();
            assert!(dev < 1e-10, "case {case}: deviation {dev}");
        }

        // Unequal norms break the identity; the gap is reported, not hidden.
        let q = vec![1.0, 0.0];
        let keys = vec![vec![0.5, 0.0], vec![0.0, 3.0]];
        let dev = attention_vs_nw(&q, &keys, 2).unwrap();
        assert!(dev > 1e-4, "unequal norms should show a real gap, got {dev}");
    }

    #[test]
    fn tilt_factorization_equals_the_direct_softmax() {
        let mut rng = Rng::new(24);
        for case in 0..20 {
            let n = 2 + rng.next_below(7);
            let c = 2 + rng.next_below(15);
            let head = random_head(100 + case, n, 1);
            let q: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
            let keys: Vec<Vec<f64>> =
                (0..c).map(|_| (0..n).map(|_| rng.next_gaussian()).collect()).collect();

            let tilt = tilt_factorization(&head, &q, &keys).unwrap();
            let mut direct: Vec<f64> = keys.iter().map(|k| head.score(&q, k)).collect();
            softmax_in_place(&mut direct, 1.0);
            let dev = tilt.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-10, "case {case}: deviation {dev}");
        }
    }

    #[test]
    fn identity_head_reduces_to_the_plain_gaussian_kernel() {
        let head = SpectralHead::new(Matrix::identity(4), 4).unwrap();
        let mut rng = Rng::new(25);
        let q: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
        let raw: Vec<Vec<f64>> =
            (0..6).map(|_| (0..4).map(|_| rng.next_gaussian()).collect()).collect();
        let keys = rescale_to_norm(&raw, 1.3).unwrap();
        let tilt = tilt_factorization(&head, &q, &keys).unwrap();
        let nw = nw_weights(&q, &keys, 1.0).unwrap();
        for (a, b) in tilt.iter().zip(&nw) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn a_dominant_mode_concentrates_the_weights() {
        let mut m = Matrix::zeros(4, 4);
        m.set(0, 0, 50.0);
        for d in 1..4 {
            m.set(d, d, 0.1);
        }
        let head = SpectralHead::new(m, 4).unwrap();
        let q = vec![1.0, 0.0, 0.0, 0.0];
        let keys = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let w = tilt_factorization(&head, &q, &keys).unwrap();
        assert!(w[0] > 0.999, "aligned key got {}", w[0]);
    }

    #[test]
    fn log_residual_mass_matches_brute_force() {
        let mut rng = Rng::new(26);
        for _ in 0..30 {
            let scores: Vec<f64> = (0..8).map(|_| 3.0 * rng.next_gaussian()).collect();
            let beta = rng.range_f64(0.2, 5.0);
            let j = rng.next_below(8);
            let mut probs = scores.clone();
            softmax_in_place(&mut probs, beta);
            let brute = 1.0 - probs[j];
            let stable = log_residual_mass(&scores, j, beta).exp();
            assert!((brute - stable).abs() < 1e-12);
        }
        // Extreme temperatures stay finite in log space: the residual decays
        // like exp(-beta * gap) with gap 2 here.
        let scores = vec![5.0, 3.0, 1.0];
        let ln = log_residual_mass(&scores, 0, 1e4);
        assert!(ln.is_finite());
        assert!((ln + 2e4).abs() < 1e-6);
    }

    #[test]
    fn generic_gap_bound_covers_arbitrary_scores() {
        let mut rng = Rng::new(27);
        for _ in 0..200 {
            let c = 2 + rng.next_below(20);
            let scores: Vec<f64> = (0..c).map(|_| 4.0 * rng.next_gaussian()).collect();
            let beta = rng.range_f64(0.1, 8.0);
            let (lhs, rhs) = generic_residual_bound(&scores, beta).unwrap();
            assert!(lhs <= rhs, "lhs {lhs} vs rhs {rhs}");
        }
        assert_eq!(generic_residual_bound(&[1.0, 1.0], 1.0), None);
        assert_eq!(generic_residual_bound(&[1.0], 1.0), None);
    }

    #[test]
    fn zero_tail_instances_always_satisfy_the_bound() {
        for seed in 0..60 {
            let inst = sample_instance(seed, InstanceFamily::ZeroTail).unwrap();
            assert_eq!(inst.head.rho, 0.0);
            assert_eq!(inst.head.r, inst.head.n());
            let report = verify_bound(&inst).unwrap();
            assert!(report.all_assumptions_ok());
            assert_eq!(report.violations(), 0);
            let check = report.queries[0].check.as_ref().unwrap();
            assert!(check.slack >= 0.0);
            assert!(check.lhs <= check.rhs_truncated);
            assert!(check.lhs <= check.rhs_generic);
        }
    }

    #[test]
    fn measured_tail_instances_always_satisfy_the_bound() {
        for seed in 200..260 {
            let inst = sample_instance(seed, InstanceFamily::MeasuredTail).unwrap();
            assert!(inst.head.rho > 0.0, "tail family must carry a real tail");
            assert!(inst.head.r < inst.head.n());
            let report = verify_bound(&inst).unwrap();
            assert!(report.all_assumptions_ok());
            assert_eq!(report.violations(), 0);
            let check = report.queries[0].check.as_ref().unwrap();
            // The measured margin really does clear the tail term.
            let tail = 2.0 * inst.head.rho.sqrt() * inst.max_query_norm() * inst.max_key_norm();
            assert!(check.margin_truncated > tail);
        }
    }

    #[test]
    fn degenerate_margin_reports_failed_hypotheses() {
        // A query in the head's left null space scores exactly zero against
        // every key, so the symmetric pair carries no margin at all.
        let mut m = Matrix::zeros(4, 4);
        m.set(1, 1, 2.0);
        m.set(2, 2, 1.0);
        m.set(3, 3, 0.5);
        let head = SpectralHead::new(m, 4).unwrap();
        let q = vec![1.0, 0.0, 0.0, 0.0];
        let mut rng = Rng::new(302);
        let k1: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
        let k2: Vec<f64> = k1.iter().map(|x| -x).collect();
        assert_eq!(head.score(&q, &k1), 0.0);
        assert_eq!(head.score(&q, &k2), 0.0);

        let inst = BoundInstance::new(head, vec![q], vec![k1, k2], 2.0, 303).unwrap();
        let report = verify_bound(&inst).unwrap();
        let verdict = &report.queries[0];
        assert!(!verdict.assumptions_ok);
        assert!(verdict.check.is_none(), "no verdict may be issued");
        assert!(verdict.failed.contains(&Assumption::ScoreMargin));
        assert!(verdict.failed.contains(&Assumption::MarginCondition));
    }

    #[test]
    fn multi_query_instances_check_each_query() {
        let head = random_head(310, 5, 5);
        let mut rng = Rng::new(311);
        let queries: Vec<Vec<f64>> =
            (0..3).map(|_| unit_gaussian(5, &mut rng).unwrap()).collect();
        let keys: Vec<Vec<f64>> = (0..8).map(|_| unit_gaussian(5, &mut rng).unwrap()).collect();
        let inst = BoundInstance::new(head, queries, keys, 1.5, 312).unwrap();
        let report = verify_bound(&inst).unwrap();
        assert_eq!(report.queries.len(), 3);
        for verdict in &report.queries {
            if let Some(check) = &verdict.check {
                assert!(check.holds);
                assert_ne!(check.j_star, check.j_dagger);
            }
        }
    }

    #[test]
    fn residual_decay_is_at_least_the_bound_rate() {
        for seed in 400..404 {
            let inst = sample_instance(seed, InstanceFamily::ZeroTail).unwrap();
            let slope = log_slope_check(&inst).unwrap();
            assert!(slope.ok, "seed {seed}: lhs {} vs rhs {}", slope.slope_lhs, slope.slope_rhs);
        }
        for seed in 410..414 {
            let inst = sample_instance(seed, InstanceFamily::MeasuredTail).unwrap();
            let slope = log_slope_check(&inst).unwrap();
            assert!(slope.ok, "seed {seed}: lhs {} vs rhs {}", slope.slope_lhs, slope.slope_rhs);
            assert!(slope.slope_lhs < slope.slope_rhs, "a real tail leaves real slack");
        }
    }

    #[test]
    fn suite_reports_both_families_with_no_violations() {
        let suite = run_bound_suite(40, 9000).unwrap();
        assert_eq!(suite.instances, 40);
        assert_eq!(suite.rows.len(), 40);
        assert!(suite.all_pass(), "violations: {} + {}", suite.violations, suite.rank_sweep_violations);
        assert!(suite.rank_sweep_checks > 0);
        assert!(suite.rows.iter().any(|r| r.family == "zero_tail"));
        assert!(suite.rows.iter().any(|r| r.family == "measured_tail"));
        for row in &suite.rows {
            assert!(row.assumptions_ok);
            assert!(row.slack >= 0.0);
        }

        let json = serde_json::to_string(&suite).unwrap();
        assert!(json.contains("\"rhs_truncated\""));

        let again = run_bound_suite(40, 9000).unwrap();
        assert_eq!(serde_json::to_string(&again).unwrap(), json);
    }

    #[test]
    fn instance_construction_is_validated() {
        let head = random_head(320, 3, 3);
        let q = vec![1.0, 0.0, 0.0];
        let k = vec![0.0, 1.0, 0.0];
        assert!(BoundInstance::new(head.clone(), vec![q.clone()], vec![k.clone()], 0.0, 0).is_err());
        assert!(BoundInstance::new(head.clone(), vec![], vec![k.clone(), q.clone()], 1.0, 0).is_err());
        assert!(BoundInstance::new(head.clone(), vec![q.clone()], vec![k.clone()], 1.0, 0).is_err());
        assert!(BoundInstance::new(head, vec![vec![1.0, 0.0]], vec![k, q], 1.0, 0).is_err());
    }
}

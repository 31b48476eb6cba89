//! Ablation experiments: stable-rank head orderings, the minimal-kept-heads
//! search, layer sweeps, and deterministic plan assembly.
//!
//! Everything here runs against an immutable [`ModelBundle`] and an
//! evaluation set of (context, target) windows. Baseline forecasts and the
//! baseline error are computed once per (bundle, data) pair by [`Evaluator`]
//! and reused across scans, keyed by a content hash for provenance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::{self, MetricValue, COMPARE_WINDOW};
use crate::model::{forecast, AblationPlan, Component, ForwardOptions, ModelBundle, ModelConfig};
use crate::numerics::{stable_rank, Rng};
use crate::report;
use crate::synthdata::TimeSeries;
use crate::train::TrainExample;

/// Relative error increase allowed by the minimal-kept-heads search.
pub const KEEP_TOLERANCE: f64 = 0.01;

/// Which attention block of a decoder layer a head ordering targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    SelfAttn,
    CrossAttn,
}

impl AttnKind {
    pub fn component(self, head: usize) -> Component {
        match self {
            AttnKind::SelfAttn => Component::SelfHead(head),
            AttnKind::CrossAttn => Component::CrossHead(head),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AttnKind::SelfAttn => "self",
            AttnKind::CrossAttn => "cross",
        }
    }
}

/// Scalar error metric used to judge ablations on an evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    #[default]
    Mase,
    Smape,
    Nrmse,
}

impl ErrorMetric {
    pub fn name(self) -> &'static str {
        match self {
            ErrorMetric::Mase => "mase",
            ErrorMetric::Smape => "smape",
            ErrorMetric::Nrmse => "nrmse",
        }
    }

    fn score(self, forecast: &[f64], actual: &[f64], insample: &[f64], season: usize) -> Result<MetricValue> {
        match self {
            ErrorMetric::Mase => evalmetrics::mase(forecast, actual, insample, season),
            ErrorMetric::Smape => evalmetrics::smape(forecast, actual),
            ErrorMetric::Nrmse => evalmetrics::nrmse(forecast, actual),
        }
    }
}

/// Per-head stable ranks of the scaled query-key product
/// `W_Q W_K^T / sqrt(d_head)`. A head whose product is the zero matrix has
/// no stable rank and comes back as `None`.
pub fn head_stable_ranks(bundle: &ModelBundle, layer: usize, kind: AttnKind) -> Result<Vec<Option<f64>>> {
    let cfg = &bundle.config;
    if layer >= cfg.layers {
        return Err(Error::Config(format!("layer {layer} out of range, model has {}", cfg.layers)));
    }
    let attn = match kind {
        AttnKind::SelfAttn => &bundle.weights.decoder[layer].self_attn,
        AttnKind::CrossAttn => bundle.weights.decoder[layer].cross_attn.as_ref().ok_or_else(|| {
            Error::UnsupportedArch { op: "head_stable_ranks", arch: cfg.arch_name().into() }
        })?,
    };
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    attn.heads
        .iter()
        .map(|head| {
            let product = head.w_q.matmul(&head.w_k.transpose())?.scale(scale);
            match stable_rank(&product) {
                Ok(sr) => Ok(Some(sr)),
                Err(Error::Undefined { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// How to order heads for progressive ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingStrategy {
    /// Ablate from high to low stable rank, so the kept heads are the
    /// lowest-stable-rank ones.
    SrankDesc,
    /// Ablate from low to high stable rank.
    SrankAsc,
    /// Seeded random permutation, the control ordering.
    Random { seed: u64 },
}

impl OrderingStrategy {
    pub fn label(self) -> String {
        match self {
            OrderingStrategy::SrankDesc => "srank_desc".into(),
            OrderingStrategy::SrankAsc => "srank_asc".into(),
            OrderingStrategy::Random { seed } => format!("random:{seed}"),
        }
    }
}

/// An ablation order over the heads of one attention block: `order[0]` is
/// ablated first, and keeping `k` heads means keeping the last `k` entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadOrdering {
    pub layer: usize,
    pub kind: AttnKind,
    pub strategy: OrderingStrategy,
    pub order: Vec<usize>,
    /// Stable rank per head index (not in `order` order); `None` marks a
    /// zero query-key product.
    pub stable_ranks: Vec<Option<f64>>,
}

impl HeadOrdering {
    /// The heads still active when `k` are kept.
    pub fn kept(&self, k: usize) -> &[usize] {
        &self.order[self.order.len() - k..]
    }

    /// Plan ablating all but the last `k` heads of the order.
    pub fn plan_keeping(&self, k: usize) -> Result<AblationPlan> {
        if k > self.order.len() {
            return Err(Error::Config(format!("cannot keep {k} of {} heads", self.order.len())));
        }
        let mut plan = AblationPlan::empty();
        for &head in &self.order[..self.order.len() - k] {
            plan.add(self.layer, self.kind.component(head));
        }
        Ok(plan)
    }
}

/// Builds the ablation order for one layer's heads. Heads with undefined
/// stable rank sort after all defined ones in both rank-based strategies;
/// ties break toward the lower head index.
pub fn head_ordering(
    bundle: &ModelBundle,
    layer: usize,
    kind: AttnKind,
    strategy: OrderingStrategy,
) -> Result<HeadOrdering> {
    let ranks = head_stable_ranks(bundle, layer, kind)?;
    let mut order: Vec<usize> = (0..ranks.len()).collect();
    match strategy {
        OrderingStrategy::SrankDesc => sort_by_rank(&mut order, &ranks, false),
        OrderingStrategy::SrankAsc => sort_by_rank(&mut order, &ranks, true),
        OrderingStrategy::Random { seed } => {
            let mut rng = Rng::new(seed);
            for i in (1..order.len()).rev() {
                let j = rng.next_below(i + 1);
                order.swap(i, j);
            }
        }
    }
    Ok(HeadOrdering { layer, kind, strategy, order, stable_ranks: ranks })
}

/// Sorts head indices by stable rank; undefined ranks come last in either
/// direction and ties break toward the lower index.
fn sort_by_rank(order: &mut [usize], ranks: &[Option<f64>], ascending: bool) {
    order.sort_by(|&a, &b| match (ranks[a], ranks[b]) {
        (Some(x), Some(y)) => {
            let by_rank = if ascending { x.total_cmp(&y) } else { y.total_cmp(&x) };
            by_rank.then(a.cmp(&b))
        }
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
}

/// Shared evaluation state: baseline forecasts and error for one
/// (bundle, data) pair, computed once and addressed by content hash.
pub struct Evaluator<'a> {
    pub bundle: &'a ModelBundle,
    pub data: &'a [TrainExample],
    pub metric: ErrorMetric,
    pub season: usize,
    /// sha256 over the serialized bundle and evaluation set.
    pub key: String,
    pub baseline_error: f64,
    pub baseline_forecasts: Vec<Vec<f64>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        bundle: &'a ModelBundle,
        data: &'a [TrainExample],
        metric: ErrorMetric,
        season: usize,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("evaluation set is empty".into()));
        }
        for (i, ex) in data.iter().enumerate() {
            if ex.context.is_empty() || ex.target.is_empty() {
                return Err(Error::Config(format!("evaluation example {i} has an empty side")));
            }
            if ex.target.len() > bundle.config.horizon {
                return Err(Error::Config(format!(
                    "evaluation example {i} target length {} exceeds horizon {}",
                    ex.target.len(),
                    bundle.config.horizon
                )));
            }
        }
        let key = content_key(bundle, data)?;
        let forecasts = run_forecasts(bundle, data, AblationPlan::none())?;
        let baseline_forecasts: Vec<Vec<f64>> = forecasts
            .into_iter()
            .enumerate()
            .map(|(i, f)| f.ok_or_else(|| Error::Config(format!("baseline forecast failed on example {i}"))))
            .collect::<Result<_>>()?;
        let baseline_error = score_forecasts(
            data,
            &baseline_forecasts.iter().map(|f| Some(f.clone())).collect::<Vec<_>>(),
            metric,
            season,
        )?
        .ok_or(Error::UndefinedMetric {
            metric: metric.name(),
            reason: "undefined on every baseline series".into(),
        })?;
        Ok(Evaluator { bundle, data, metric, season, key, baseline_error, baseline_forecasts })
    }

    /// Forecast every evaluation series under a plan. A series whose
    /// forecast fails comes back as `None`.
    pub fn forecasts_with(&self, plan: &AblationPlan) -> Result<Vec<Option<Vec<f64>>>> {
        plan.validate(&self.bundle.config)?;
        run_forecasts(self.bundle, self.data, plan)
    }

    /// Aggregate error under a plan, per the evaluator's metric.
    pub fn error_with(&self, plan: &AblationPlan) -> Result<f64> {
        let forecasts = self.forecasts_with(plan)?;
        score_forecasts(self.data, &forecasts, self.metric, self.season)?.ok_or(Error::UndefinedMetric {
            metric: self.metric.name(),
            reason: "undefined on every series under this plan".into(),
        })
    }
}

fn content_key(bundle: &ModelBundle, data: &[TrainExample]) -> Result<String> {
    let mut bytes = serde_json::to_vec(bundle)?;
    for ex in data {
        bytes.extend_from_slice(&serde_json::to_vec(&ex.context)?);
        bytes.extend_from_slice(&serde_json::to_vec(&ex.target)?);
    }
    Ok(report::sha256_hex(&bytes))
}

fn run_forecasts(
    bundle: &ModelBundle,
    data: &[TrainExample],
    plan: &AblationPlan,
) -> Result<Vec<Option<Vec<f64>>>> {
    let results: Vec<Option<Vec<f64>>> = data
        .par_iter()
        .map(|ex| {
            let ts = TimeSeries::univariate("eval", 1.0, ex.context.clone()).ok()?;
            let out = forecast(bundle, &ts, ForwardOptions::with_plan(plan)).ok()?;
            let mut values = out.forecast.channel(0);
            values.truncate(ex.target.len());
            Some(values)
        })
        .collect();
    if results.iter().all(Option::is_none) {
        // Nothing succeeded; rerun one series for the underlying error.
        let ts = TimeSeries::univariate("eval", 1.0, data[0].context.clone())?;
        forecast(bundle, &ts, ForwardOptions::with_plan(plan))?;
        return Err(Error::Config("every forecast failed".into()));
    }
    Ok(results)
}

/// Geometric-mean aggregate of the metric over series with a defined value
/// and a successful forecast. `None` when nothing is defined.
fn score_forecasts(
    data: &[TrainExample],
    forecasts: &[Option<Vec<f64>>],
    metric: ErrorMetric,
    season: usize,
) -> Result<Option<f64>> {
    let mut defined = Vec::new();
    for (ex, f) in data.iter().zip(forecasts) {
        let Some(f) = f else { continue };
        let scored = metric.score(f, &ex.target, &ex.context, season)?;
        if let Some(v) = scored.value {
            defined.push(v);
        }
    }
    Ok(evalmetrics::geometric_mean(&defined))
}

/// Result of the minimal-kept-heads scan on one attention block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Heads1ppResult {
    pub layer: usize,
    pub kind: AttnKind,
    pub strategy: OrderingStrategy,
    /// Minimal number of kept heads whose error stays within tolerance.
    pub k: usize,
    pub heads_total: usize,
    pub metric: String,
    pub tolerance: f64,
    pub baseline_error: f64,
    /// Error at the accepted `k`.
    pub ablated_error: f64,
    /// Error for every tried keep count, indexed by k = 0..=`k`.
    pub errors: Vec<f64>,
    pub order: Vec<usize>,
}

impl Heads1ppResult {
    pub fn kept_heads(&self) -> &[usize] {
        &self.order[self.heads_total - self.k..]
    }

    pub fn relative_increase(&self) -> f64 {
        (self.ablated_error - self.baseline_error) / self.baseline_error
    }
}

/// Scans keep counts k = 0, 1, ... along an ablation ordering and returns
/// the first k whose error is within 1% of baseline. k = H ablates nothing,
/// so the scan always terminates.
pub fn heads_at_1pp(ev: &Evaluator, ordering: &HeadOrdering) -> Result<Heads1ppResult> {
    let h = ordering.order.len();
    if !ev.baseline_error.is_finite() || ev.baseline_error <= 0.0 {
        return Err(Error::Undefined {
            op: "heads_at_1pp",
            detail: format!("baseline error must be finite and positive, got {}", ev.baseline_error),
        });
    }
    let mut errors = Vec::with_capacity(h + 1);
    for k in 0..=h {
        let err = ev.error_with(&ordering.plan_keeping(k)?)?;
        errors.push(err);
        if (err - ev.baseline_error) / ev.baseline_error <= KEEP_TOLERANCE {
            return Ok(Heads1ppResult {
                layer: ordering.layer,
                kind: ordering.kind,
                strategy: ordering.strategy,
                k,
                heads_total: h,
                metric: ev.metric.name().into(),
                tolerance: KEEP_TOLERANCE,
                baseline_error: ev.baseline_error,
                ablated_error: err,
                errors,
                order: ordering.order.clone(),
            });
        }
    }
    unreachable!("k = H leaves the model unablated, so its error equals baseline");
}

/// Error for every subset of kept heads in one attention block, and the
/// smallest keep count any within-tolerance subset achieves. Exponential in
/// the head count; refuses more than 12 heads.
pub fn exhaustive_min_keep(
    ev: &Evaluator,
    layer: usize,
    kind: AttnKind,
) -> Result<(usize, Vec<(Vec<usize>, f64)>)> {
    let h = ev.bundle.config.heads;
    if h > 12 {
        return Err(Error::Config(format!("exhaustive search over 2^{h} keep-sets is not tractable")));
    }
    let mut table = Vec::with_capacity(1 << h);
    let mut best = h;
    for mask in 0u32..(1 << h) {
        let kept: Vec<usize> = (0..h).filter(|i| mask >> i & 1 == 1).collect();
        let mut plan = AblationPlan::empty();
        for head in 0..h {
            if mask >> head & 1 == 0 {
                plan.add(layer, kind.component(head));
            }
        }
        let err = ev.error_with(&plan)?;
        if (err - ev.baseline_error) / ev.baseline_error <= KEEP_TOLERANCE {
            best = best.min(kept.len());
        }
        table.push((kept, err));
    }
    Ok((best, table))
}

/// What a layer sweep ablates in each layer group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepTarget {
    AllHeads,
    Mlp,
    EntireLayer,
}

impl SweepTarget {
    pub fn label(self) -> &'static str {
        match self {
            SweepTarget::AllHeads => "all_heads",
            SweepTarget::Mlp => "mlp",
            SweepTarget::EntireLayer => "entire_layer",
        }
    }

    fn components(self, encoder_decoder: bool) -> Vec<Component> {
        match self {
            SweepTarget::AllHeads if encoder_decoder => {
                vec![Component::AllSelfHeads, Component::AllCrossHeads]
            }
            SweepTarget::AllHeads => vec![Component::AllSelfHeads],
            SweepTarget::Mlp => vec![Component::Mlp],
            SweepTarget::EntireLayer => vec![Component::EntireLayer],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub targets: Vec<SweepTarget>,
    pub group_size: usize,
    /// Leading forecast points compared by Spearman distance.
    pub window: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            targets: vec![SweepTarget::AllHeads, SweepTarget::Mlp, SweepTarget::EntireLayer],
            group_size: 1,
            window: COMPARE_WINDOW,
        }
    }
}

/// One (layer group, target) cell of a sweep. The control row has no
/// target and ablates nothing.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub layers: Vec<usize>,
    pub group: Option<usize>,
    pub target: Option<SweepTarget>,
    pub ablated_error: Option<f64>,
    pub pct_change: Option<f64>,
    /// Mean Spearman distance to the baseline forecasts over the window,
    /// across series that forecast successfully.
    pub spearman_distance: Option<f64>,
    pub series_failed: usize,
    /// Per-series ablated forecasts, aligned with the evaluation set.
    pub forecasts: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub metric: String,
    pub baseline_error: f64,
    pub baseline_key: String,
    pub window: usize,
    pub baseline_forecasts: Vec<Vec<f64>>,
    pub rows: Vec<SweepRow>,
}

/// Ablates each contiguous layer group one target at a time and scores the
/// damage. The first row is the unablated control.
pub fn layer_sweep(ev: &Evaluator, cfg: &SweepConfig) -> Result<SweepReport> {
    if cfg.group_size == 0 {
        return Err(Error::Config("group size must be at least 1".into()));
    }
    let layers = ev.bundle.config.layers;
    let encoder_decoder = ev.bundle.config.is_encoder_decoder();

    let mut rows = Vec::new();
    rows.push(sweep_row(ev, cfg, Vec::new(), None, None, AblationPlan::none().clone())?);

    let mut group = 0usize;
    let mut start = 0usize;
    while start < layers {
        let members: Vec<usize> = (start..(start + cfg.group_size).min(layers)).collect();
        for &target in &cfg.targets {
            let mut plan = AblationPlan::empty();
            for &layer in &members {
                for comp in target.components(encoder_decoder) {
                    plan.add(layer, comp);
                }
            }
            rows.push(sweep_row(ev, cfg, members.clone(), Some(group), Some(target), plan)?);
        }
        start += cfg.group_size;
        group += 1;
    }

    Ok(SweepReport {
        metric: ev.metric.name().into(),
        baseline_error: ev.baseline_error,
        baseline_key: ev.key.clone(),
        window: cfg.window,
        baseline_forecasts: ev.baseline_forecasts.clone(),
        rows,
    })
}

fn sweep_row(
    ev: &Evaluator,
    cfg: &SweepConfig,
    layers: Vec<usize>,
    group: Option<usize>,
    target: Option<SweepTarget>,
    plan: AblationPlan,
) -> Result<SweepRow> {
    let forecasts = ev.forecasts_with(&plan)?;
    let series_failed = forecasts.iter().filter(|f| f.is_none()).count();
    let ablated_error = score_forecasts(ev.data, &forecasts, ev.metric, ev.season)?;
    let pct_change = ablated_error.map(|e| 100.0 * (e - ev.baseline_error) / ev.baseline_error);
    let spearman_distance =
        mean_window_distance(&ev.baseline_forecasts, &forecasts, cfg.window)?;
    Ok(SweepRow {
        layers,
        group,
        target,
        ablated_error,
        pct_change,
        spearman_distance,
        series_failed,
        forecasts,
    })
}

/// Mean Spearman distance between baseline and ablated forecasts over the
/// first `window` points, skipping failed series. `None` if all failed.
pub fn mean_window_distance(
    baseline: &[Vec<f64>],
    ablated: &[Option<Vec<f64>>],
    window: usize,
) -> Result<Option<f64>> {
    let mut distances = Vec::new();
    for (base, abl) in baseline.iter().zip(ablated) {
        let Some(abl) = abl else { continue };
        let n = window.min(base.len()).min(abl.len());
        distances.push(evalmetrics::spearman_distance(&base[..n], &abl[..n])?);
    }
    Ok(evalmetrics::arithmetic_mean(&distances))
}

const SWEEP_HEADER: [&str; 10] = [
    "layer", "group", "target", "k", "strategy", "metric", "baseline", "ablated", "pct_change",
    "spearman_distance",
];

fn layer_span(layers: &[usize]) -> String {
    match layers {
        [] => String::new(),
        [only] => only.to_string(),
        [first, .., last] => format!("{first}-{last}"),
    }
}

fn opt_cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Sweep report CSV with one row per (layer group, target) cell plus the
/// leading control row.
pub fn sweep_csv(rep: &SweepReport) -> String {
    let rows: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|row| {
            vec![
                layer_span(&row.layers),
                opt_cell(row.group),
                row.target.map(|t| t.label().to_string()).unwrap_or_else(|| "none".into()),
                String::new(),
                String::new(),
                rep.metric.clone(),
                rep.baseline_error.to_string(),
                opt_cell(row.ablated_error),
                opt_cell(row.pct_change),
                opt_cell(row.spearman_distance),
            ]
        })
        .collect();
    report::csv_body(&SWEEP_HEADER, &rows)
}

/// Keep-count scan CSV in the same schema as the layer sweep, one row per
/// tried k.
pub fn heads_scan_csv(results: &[Heads1ppResult]) -> String {
    let mut rows = Vec::new();
    for res in results {
        for (k, err) in res.errors.iter().enumerate() {
            rows.push(vec![
                res.layer.to_string(),
                String::new(),
                format!("{}_heads", res.kind.label()),
                k.to_string(),
                res.strategy.label(),
                res.metric.clone(),
                res.baseline_error.to_string(),
                err.to_string(),
                (100.0 * (err - res.baseline_error) / res.baseline_error).to_string(),
                String::new(),
            ]);
        }
    }
    report::csv_body(&SWEEP_HEADER, &rows)
}

/// A per-block keep instruction for plan assembly.
#[derive(Debug, Clone)]
pub struct HeadKeep {
    pub ordering: HeadOrdering,
    pub keep: usize,
}

/// An assembled plan plus its head-count bookkeeping.
#[derive(Debug, Clone)]
pub struct PlanBuild {
    pub plan: AblationPlan,
    pub heads_ablated: usize,
    pub heads_total: usize,
    pub pct_heads_ablated: f64,
}

/// Composes head-keep instructions and MLP ablations into one plan.
/// `heads_total` counts every head in the decoder stack (both attention
/// blocks for encoder-decoder models), so the percentage is of all heads
/// the plan could have targeted.
pub fn build_plan(cfg: &ModelConfig, keeps: &[HeadKeep], mlp_layers: &[usize]) -> Result<PlanBuild> {
    let mut seen = std::collections::BTreeSet::new();
    let mut plan = AblationPlan::empty();
    let mut heads_ablated = 0usize;

    for keep in keeps {
        let ord = &keep.ordering;
        if !seen.insert((ord.layer, ord.kind.label())) {
            return Err(Error::Config(format!(
                "conflicting keep instructions for layer {} {} attention",
                ord.layer,
                ord.kind.label()
            )));
        }
        if ord.order.len() != cfg.heads || !is_permutation(&ord.order) {
            return Err(Error::Config(format!(
                "ordering for layer {} is not a permutation of 0..{}",
                ord.layer, cfg.heads
            )));
        }
        if keep.keep > cfg.heads {
            return Err(Error::Config(format!("cannot keep {} of {} heads", keep.keep, cfg.heads)));
        }
        for &head in &ord.order[..cfg.heads - keep.keep] {
            plan.add(ord.layer, ord.kind.component(head));
            heads_ablated += 1;
        }
    }
    for &layer in mlp_layers {
        plan.add(layer, Component::Mlp);
    }
    plan.validate(cfg)?;

    let blocks_per_layer = if cfg.is_encoder_decoder() { 2 } else { 1 };
    let heads_total = cfg.layers * cfg.heads * blocks_per_layer;
    Ok(PlanBuild {
        plan,
        heads_ablated,
        heads_total,
        pct_heads_ablated: 100.0 * heads_ablated as f64 / heads_total as f64,
    })
}

fn is_permutation(order: &[usize]) -> bool {
    let mut seen = vec![false; order.len()];
    for &i in order {
        if i >= order.len() || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

//! Forecast accuracy metrics (MASE, sMAPE, NRMSE, MSIS, quantile CRPS) and a
//! rank-correlation distance for comparing two forecasts.
//!
//! Degenerate inputs never panic: a metric whose denominator vanishes comes
//! back as an explicitly flagged undefined value, and undefined values are
//! excluded from aggregates. Structural problems (length mismatches, bad
//! quantile levels) are errors.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::report;

/// Interval coverage for MSIS: a 95% interval, scored at alpha = 0.05.
pub const MSIS_ALPHA: f64 = 0.05;

/// Values are floored at this before taking logs in the geometric mean.
pub const GEO_MEAN_EPS: f64 = 1e-9;

/// Default number of leading forecast points compared in ablation sweeps.
pub const COMPARE_WINDOW: usize = 64;

/// Annotations attached to a computed metric value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricFlag {
    /// The metric's denominator vanished; no value was produced.
    Undefined,
    /// The normalizer was below 1e-12, so the raw (unnormalized) value is
    /// reported instead.
    Unnormalized,
    /// At least one quantile row was not monotone in the level axis.
    NonMonotoneQuantiles,
    /// This many zero-denominator terms were dropped from the mean.
    SkippedTerms(usize),
}

impl fmt::Display for MetricFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricFlag::Undefined => write!(f, "undefined"),
            MetricFlag::Unnormalized => write!(f, "unnormalized"),
            MetricFlag::NonMonotoneQuantiles => write!(f, "nonmonotone_quantiles"),
            MetricFlag::SkippedTerms(n) => write!(f, "skipped_terms:{n}"),
        }
    }
}

/// A metric result: a value when one exists, plus any flags raised while
/// computing it.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricValue {
    pub value: Option<f64>,
    pub flags: Vec<MetricFlag>,
}

impl MetricValue {
    fn defined(value: f64) -> Self {
        MetricValue { value: Some(value), flags: Vec::new() }
    }

    fn undefined() -> Self {
        MetricValue { value: None, flags: vec![MetricFlag::Undefined] }
    }

    fn with_flag(mut self, flag: MetricFlag) -> Self {
        self.flags.push(flag);
        self
    }

    pub fn is_defined(&self) -> bool {
        self.value.is_some()
    }

    /// Flags joined with `;`, as written into the report CSV.
    pub fn flag_string(&self) -> String {
        self.flags.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(";")
    }
}

fn check_pair(op: &'static str, forecast: &[f64], actual: &[f64]) -> Result<()> {
    if forecast.len() != actual.len() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("forecast length {} vs actual length {}", forecast.len(), actual.len()),
        });
    }
    if forecast.is_empty() {
        return Err(Error::ShapeMismatch { op, detail: "empty series".into() });
    }
    Ok(())
}

fn mae(forecast: &[f64], actual: &[f64]) -> f64 {
    let total: f64 = forecast.iter().zip(actual).map(|(f, a)| (f - a).abs()).sum();
    total / forecast.len() as f64
}

fn mean_abs(values: &[f64]) -> f64 {
    values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64
}

/// Mean absolute one-step error of the seasonal-naive predictor on the
/// in-sample history: mean over t of |y_t - y_{t-season}|.
pub fn seasonal_naive_mae(insample: &[f64], season: usize) -> Result<f64> {
    if season == 0 {
        return Err(Error::Config("season must be at least 1".into()));
    }
    if insample.len() <= season {
        return Err(Error::Undefined {
            op: "seasonal_naive_mae",
            detail: format!("insample length {} must exceed season {}", insample.len(), season),
        });
    }
    let total: f64 = (season..insample.len()).map(|t| (insample[t] - insample[t - season]).abs()).sum();
    Ok(total / (insample.len() - season) as f64)
}

/// Mean absolute scaled error: forecast MAE divided by the seasonal-naive
/// MAE on the in-sample history. Constant history makes the scale zero and
/// the metric undefined.
pub fn mase(forecast: &[f64], actual: &[f64], insample: &[f64], season: usize) -> Result<MetricValue> {
    check_pair("mase", forecast, actual)?;
    let scale = seasonal_naive_mae(insample, season)?;
    if scale == 0.0 {
        return Ok(MetricValue::undefined());
    }
    Ok(MetricValue::defined(mae(forecast, actual) / scale))
}

/// Symmetric mean absolute percentage error, on the 0..200 scale:
/// mean of 200|f - a| / (|f| + |a|). Terms with |f| + |a| = 0 are skipped
/// and counted in a flag; if every term is skipped the metric is undefined.
pub fn smape(forecast: &[f64], actual: &[f64]) -> Result<MetricValue> {
    check_pair("smape", forecast, actual)?;
    let mut total = 0.0;
    let mut skipped = 0usize;
    for (f, a) in forecast.iter().zip(actual) {
        let denom = f.abs() + a.abs();
        if denom == 0.0 {
            skipped += 1;
        } else {
            total += 200.0 * (f - a).abs() / denom;
        }
    }
    let used = forecast.len() - skipped;
    if used == 0 {
        return Ok(MetricValue::undefined());
    }
    let mut out = MetricValue::defined(total / used as f64);
    if skipped > 0 {
        out = out.with_flag(MetricFlag::SkippedTerms(skipped));
    }
    Ok(out)
}

/// Root mean squared error divided by the mean absolute actual. Undefined
/// when the actuals are identically zero.
pub fn nrmse(forecast: &[f64], actual: &[f64]) -> Result<MetricValue> {
    check_pair("nrmse", forecast, actual)?;
    let denom = mean_abs(actual);
    if denom == 0.0 {
        return Ok(MetricValue::undefined());
    }
    let mse: f64 =
        forecast.iter().zip(actual).map(|(f, a)| (f - a) * (f - a)).sum::<f64>() / forecast.len() as f64;
    Ok(MetricValue::defined(mse.sqrt() / denom))
}

/// Mean scaled interval score for a central 95% interval. Each step scores
/// the interval width plus 2/alpha times any excursion of the actual outside
/// [lower, upper]; the mean is divided by the seasonal-naive MAE.
pub fn msis(
    lower: &[f64],
    upper: &[f64],
    actual: &[f64],
    insample: &[f64],
    season: usize,
) -> Result<MetricValue> {
    check_pair("msis", lower, actual)?;
    check_pair("msis", upper, actual)?;
    let scale = seasonal_naive_mae(insample, season)?;
    if scale == 0.0 {
        return Ok(MetricValue::undefined());
    }
    let penalty = 2.0 / MSIS_ALPHA;
    let mut total = 0.0;
    for i in 0..actual.len() {
        let (l, u, y) = (lower[i], upper[i], actual[i]);
        total += u - l;
        if y < l {
            total += penalty * (l - y);
        }
        if y > u {
            total += penalty * (y - u);
        }
    }
    Ok(MetricValue::defined(total / actual.len() as f64 / scale))
}

/// Pinball (quantile) loss of predicting `q` for outcome `y` at level `tau`.
pub fn pinball(tau: f64, q: f64, y: f64) -> f64 {
    let r = y - q;
    tau * r.max(0.0) + (tau - 1.0) * r.min(0.0)
}

/// CRPS approximated from a finite set of quantile forecasts: the mean over
/// levels and horizon steps of twice the pinball loss, normalized by the mean
/// absolute actual. `quantiles` is horizon x levels. A near-zero normalizer
/// (< 1e-12) leaves the value unnormalized with a flag; rows that are not
/// monotone in the level axis are flagged but still scored.
pub fn crps_from_quantiles(levels: &[f64], quantiles: &Matrix, actual: &[f64]) -> Result<MetricValue> {
    if levels.is_empty() {
        return Err(Error::Config("quantile levels must be non-empty".into()));
    }
    for (i, &tau) in levels.iter().enumerate() {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!("quantile level {tau} is outside (0, 1)")));
        }
        if i > 0 && tau <= levels[i - 1] {
            return Err(Error::Config(format!(
                "quantile levels must be strictly increasing, got {} then {tau}",
                levels[i - 1]
            )));
        }
    }
    if quantiles.rows() != actual.len() || quantiles.cols() != levels.len() {
        return Err(Error::ShapeMismatch {
            op: "crps_from_quantiles",
            detail: format!(
                "quantile matrix is {}x{}, expected {}x{}",
                quantiles.rows(),
                quantiles.cols(),
                actual.len(),
                levels.len()
            ),
        });
    }
    if actual.is_empty() {
        return Err(Error::ShapeMismatch { op: "crps_from_quantiles", detail: "empty series".into() });
    }

    let mut non_monotone = false;
    let mut total = 0.0;
    for (t, &y) in actual.iter().enumerate() {
        let row = quantiles.row(t);
        for k in 1..row.len() {
            if row[k] < row[k - 1] {
                non_monotone = true;
            }
        }
        for (k, &tau) in levels.iter().enumerate() {
            total += 2.0 * pinball(tau, row[k], y);
        }
    }
    let raw = total / (actual.len() * levels.len()) as f64;

    let denom = mean_abs(actual);
    let mut out = if denom < 1e-12 {
        MetricValue::defined(raw).with_flag(MetricFlag::Unnormalized)
    } else {
        MetricValue::defined(raw / denom)
    };
    if non_monotone {
        out = out.with_flag(MetricFlag::NonMonotoneQuantiles);
    }
    Ok(out)
}

/// Ranks with ties given the average of the positions they occupy (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman distance 1 - rho_s(x, y), in [0, 2]. rho_s is the Pearson
/// correlation of the average ranks; when either rank vector has zero
/// variance the correlation is taken to be 0, so the distance is 1.
pub fn spearman_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "spearman_distance",
            detail: format!("lengths {} vs {}", x.len(), y.len()),
        });
    }
    if x.len() < 2 {
        return Err(Error::Undefined {
            op: "spearman_distance",
            detail: format!("need at least 2 points, got {}", x.len()),
        });
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    let rho = if vx == 0.0 || vy == 0.0 { 0.0 } else { cov / (vx * vy).sqrt() };
    Ok(1.0 - rho)
}

/// Spearman distance for multichannel series: the per-channel distances
/// averaged over channels.
pub fn spearman_distance_channels(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "spearman_distance",
            detail: format!("channel counts {} vs {}", x.len(), y.len()),
        });
    }
    let mut total = 0.0;
    for (cx, cy) in x.iter().zip(y) {
        total += spearman_distance(cx, cy)?;
    }
    Ok(total / x.len() as f64)
}

pub fn arithmetic_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Geometric mean with every value floored at [`GEO_MEAN_EPS`] before the
/// log, so zero metrics do not collapse the aggregate to zero.
pub fn geometric_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let log_sum: f64 = values.iter().map(|v| v.max(GEO_MEAN_EPS).ln()).sum();
    Some((log_sum / values.len() as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Arithmetic,
    Geometric,
}

impl Aggregation {
    fn label(self) -> &'static str {
        match self {
            Aggregation::Arithmetic => "arithmetic_mean",
            Aggregation::Geometric => "geometric_mean",
        }
    }
}

/// One scored (series, metric) cell of a metrics report.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub series: String,
    pub metric: String,
    pub value: MetricValue,
}

/// Per-series metric values plus cross-series aggregates. Undefined values
/// stay in the report (flagged) but are excluded from the aggregates.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub aggregation: Aggregation,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn new(aggregation: Aggregation) -> Self {
        MetricsReport { aggregation, rows: Vec::new() }
    }

    pub fn push(&mut self, series: impl Into<String>, metric: impl Into<String>, value: MetricValue) {
        self.rows.push(ReportRow { series: series.into(), metric: metric.into(), value });
    }

    /// Metric names in first-appearance order.
    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for row in &self.rows {
            if !names.contains(&row.metric) {
                names.push(row.metric.clone());
            }
        }
        names
    }

    /// Aggregate of the defined values for one metric; None when every
    /// series left it undefined.
    pub fn aggregate(&self, metric: &str) -> Option<f64> {
        let defined: Vec<f64> =
            self.rows.iter().filter(|r| r.metric == metric).filter_map(|r| r.value.value).collect();
        match self.aggregation {
            Aggregation::Arithmetic => arithmetic_mean(&defined),
            Aggregation::Geometric => geometric_mean(&defined),
        }
    }

    /// CSV with schema `series,metric,value,flags`. Per-series rows come
    /// first, then one `aggregate` row per metric that has any defined
    /// value; the aggregate's flags cell names the aggregation method and
    /// the number of excluded (undefined) series.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        for row in &self.rows {
            let value = row.value.value.map(|v| v.to_string()).unwrap_or_default();
            rows.push(vec![row.series.clone(), row.metric.clone(), value, row.value.flag_string()]);
        }
        for metric in self.metric_names() {
            if let Some(agg) = self.aggregate(&metric) {
                let excluded = self
                    .rows
                    .iter()
                    .filter(|r| r.metric == metric && !r.value.is_defined())
                    .count();
                let mut flags = self.aggregation.label().to_string();
                if excluded > 0 {
                    flags.push_str(&format!(";excluded:{excluded}"));
                }
                rows.push(vec!["aggregate".into(), metric, agg.to_string(), flags]);
            }
        }
        report::csv_body(&["series", "metric", "value", "flags"], &rows)
    }
}

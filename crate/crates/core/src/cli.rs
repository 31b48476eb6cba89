//! Command-line surface over the library: data generation, training,
//! forecasting, ablation sweeps, lens analyses, and self-verification.
//!
//! Settings resolve as flags > JSON config file (`--config`) > built-in
//! defaults, with `TSFM_LENS_SEED` overriding the default seed when neither
//! a flag nor a config value names one. Artifacts are written atomically and
//! every artifact-producing command leaves one run manifest beside its
//! primary output. Exit codes: 0 success, 1 verification or experiment
//! failure, 2 usage or file errors.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::ablate::{
    self, AttnKind, ErrorMetric, Evaluator, OrderingStrategy, SweepConfig,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{self, Aggregation, MetricsReport};
use crate::kernel::{self, InstanceFamily, SpectralHead};
use crate::lens;
use crate::model::{
    forecast, init_weights, load_bundle, save_bundle, Arch, ForwardOptions, HeadKind, ModelConfig,
};
use crate::numerics::{softmax_in_place, Matrix, Rng};
use crate::report::{csv_body, write_atomic, RunManifest};
use crate::synthdata::{
    gen_random_walk, gen_seasonal, integrate_rk4, Dataset, OdeSpec, OdeSystem, Seasonal,
    TimeSeries,
};
use crate::train::{self, check_gradients, make_windows, LossKind, TrainConfig, TrainExample};

/// Seed used when no flag, config value, or `TSFM_LENS_SEED` is present.
pub const DEFAULT_SEED: u64 = 42;

/// Fixed per-consumer seed derivation, so each stage is independently
/// reproducible from the one top-level seed.
pub mod seed_offset {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const SUITE: u64 = 4;
    pub const ORDER: u64 = 5;
}

pub fn fan_out(seed: u64, offset: u64) -> u64 {
    seed.wrapping_add(offset)
}

#[derive(Debug, Parser)]
#[command(name = "tsfm-lens", version, about = "Train toy time series transformers and take them apart")]
pub struct Cli {
    /// JSON config file; explicit flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Top-level seed. Defaults to TSFM_LENS_SEED, then 42.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Cap on worker threads for parallel stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train a model on a dataset and save the weights.
    Train(TrainArgs),
    /// Forecast every series in a dataset, optionally scoring a held-out tail.
    Forecast(ForecastArgs),
    /// Zero-ablation sweep over layer groups.
    SweepLayers(SweepArgs),
    /// Minimal kept heads per ordering within a one-point error budget.
    Heads1pp(HeadsArgs),
    /// Logit maps, attention rollouts, head profiles, and entropic ranks.
    Lens(LensArgs),
    /// Repeated-random-token induction probe.
    Rrt(RrtArgs),
    /// Run the self-check suites.
    Verify(VerifyArgs),
}

/// Top-level shape of the JSON config file: global settings plus one
/// section per subcommand, all optional.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub gen_data: GenDataArgs,
    pub train: TrainArgs,
    pub forecast: ForecastArgs,
    pub sweep_layers: SweepArgs,
    pub heads1pp: HeadsArgs,
    pub lens: LensArgs,
    pub rrt: RrtArgs,
    pub verify: VerifyArgs,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

macro_rules! merge_opt {
    ($a:expr, $b:expr; $($f:ident),+ $(,)?) => {
        $( $a.$f = $a.$f.take().or($b.$f); )+
    };
}

macro_rules! merge_vec {
    ($a:expr, $b:expr; $($f:ident),+ $(,)?) => {
        $( if $a.$f.is_empty() { $a.$f = $b.$f; } )+
    };
}

fn pick<T>(flag: Option<T>, default: T) -> T {
    flag.unwrap_or(default)
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing required {flag}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    Lorenz,
    Thomas,
    Seasonal,
    Walk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    EncoderDecoder,
    DecoderOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    Ce,
    Mse,
    Pinball,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> LossKind {
        match l {
            LossArg::Ce => LossKind::CrossEntropy,
            LossArg::Mse => LossKind::Mse,
            LossArg::Pinball => LossKind::Pinball,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricArg {
    Mase,
    Smape,
    Nrmse,
}

impl From<MetricArg> for ErrorMetric {
    fn from(m: MetricArg) -> ErrorMetric {
        match m {
            MetricArg::Mase => ErrorMetric::Mase,
            MetricArg::Smape => ErrorMetric::Smape,
            MetricArg::Nrmse => ErrorMetric::Nrmse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum KindArg {
    #[value(name = "cross")]
    #[serde(rename = "cross")]
    Cross,
    #[value(name = "self")]
    #[serde(rename = "self")]
    SelfAttn,
}

impl From<KindArg> for AttnKind {
    fn from(k: KindArg) -> AttnKind {
        match k {
            KindArg::Cross => AttnKind::CrossAttn,
            KindArg::SelfAttn => AttnKind::SelfAttn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderArg {
    SrankDesc,
    SrankAsc,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadArg {
    Point,
    Quantile9,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteArg {
    Kernel,
    Bound,
    Gradients,
    Metrics,
    All,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataArgs {
    /// Which generator to run.
    #[arg(long, value_enum)]
    pub system: Option<SystemKind>,
    /// Number of points.
    #[arg(long)]
    pub n: Option<usize>,
    /// Integrator time step (ODE systems).
    #[arg(long)]
    pub dt: Option<f64>,
    /// Transient steps discarded before recording (ODE systems).
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Gaussian noise std for the seasonal generator.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Sinusoid periods for the seasonal generator (repeatable).
    #[arg(long = "period")]
    pub periods: Vec<f64>,
    /// Sinusoid amplitudes, zipped with the periods (repeatable).
    #[arg(long = "amplitude")]
    pub amplitudes: Vec<f64>,
    /// Sinusoid phases, zipped with the periods (repeatable).
    #[arg(long = "phase")]
    pub phases: Vec<f64>,
    /// Step std for the random-walk generator.
    #[arg(long)]
    pub step_std: Option<f64>,
    /// Output dataset path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Training dataset path.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output model path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchKind>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_head: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub context_len: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Value-bin count for the token model.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Patch length for the decoder-only model.
    #[arg(long)]
    pub patch_len: Option<usize>,
    /// Output head for the decoder-only model.
    #[arg(long, value_enum)]
    pub head: Option<HeadArg>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Stride between training windows.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output forecast CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Hold out the last horizon points of each series and score against them.
    #[arg(long)]
    pub eval: bool,
    /// Season length for the scaled error denominator.
    #[arg(long)]
    pub season: Option<usize>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output sweep CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Contiguous layers ablated together.
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    #[arg(long)]
    pub season: Option<usize>,
    /// Leading forecast points compared by rank distance.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output scan CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Layer whose heads are scanned.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Attention block to scan; defaults to cross for the token model,
    /// self for the patch model.
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Ablation orderings to scan (repeatable).
    #[arg(long = "order", value_enum)]
    pub orders: Vec<OrderArg>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    #[arg(long)]
    pub season: Option<usize>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LensArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory receiving the lens artifacts.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Motif length for the induction probe.
    #[arg(long)]
    pub rrt_motif_len: Option<usize>,
    /// Motif repeats for the induction probe.
    #[arg(long)]
    pub rrt_repeats: Option<usize>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RrtArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output report JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub motif_len: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyArgs {
    /// Suites to run (repeatable); defaults to all.
    #[arg(long = "suite", value_enum)]
    pub suites: Vec<SuiteArg>,
    /// Write the kernel-bound report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub bound_instances: Option<usize>,
    #[arg(long)]
    pub slope_checks: Option<usize>,
    #[arg(long)]
    pub tilt_cases: Option<usize>,
    #[arg(long)]
    pub nw_cases: Option<usize>,
    /// Finite-difference probes per tensor; omit to check every parameter.
    #[arg(long)]
    pub grad_samples: Option<usize>,
}

/// Parses `std::env::args` and runs. Returns the process exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Same as [`run`] but over an explicit argument list, for tests.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// Usage and file problems exit 2; failures inside a run (divergence,
/// undefined metrics, failed suites) exit 1.
fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Io(_)
        | Error::Json(_)
        | Error::Malformed { .. }
        | Error::FormatVersion { .. }
        | Error::Config(_) => 2,
        _ => 1,
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let seed = resolve_seed(cli.seed, file.seed)?;
    if let Some(jobs) = cli.jobs.or(file.jobs) {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        // First caller wins; later attempts to resize the global pool are
        // ignored so in-process reruns stay valid.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args, file.gen_data, seed).map(|_| 0),
        Command::Train(args) => cmd_train(args, file.train, seed).map(|_| 0),
        Command::Forecast(args) => cmd_forecast(args, file.forecast, seed).map(|_| 0),
        Command::SweepLayers(args) => cmd_sweep_layers(args, file.sweep_layers, seed).map(|_| 0),
        Command::Heads1pp(args) => cmd_heads1pp(args, file.heads1pp, seed).map(|_| 0),
        Command::Lens(args) => cmd_lens(args, file.lens, seed).map(|_| 0),
        Command::Rrt(args) => cmd_rrt(args, file.rrt, seed).map(|_| 0),
        Command::Verify(args) => cmd_verify(args, file.verify, seed),
    }
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var("TSFM_LENS_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("TSFM_LENS_SEED is not a valid seed: {text:?}"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn finish_manifest(
    mut manifest: RunManifest,
    started: Instant,
    inputs: &[&Path],
    outputs: &[&Path],
    primary: &Path,
) -> Result<()> {
    for p in inputs {
        manifest.record_input(p)?;
    }
    for p in outputs {
        manifest.record_output(p)?;
    }
    manifest.wall_time_ms = started.elapsed().as_millis() as u64;
    manifest.write_beside(primary)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct GenDataSettings {
    system: SystemKind,
    n: usize,
    dt: f64,
    burn_in: usize,
    noise: f64,
    periods: Vec<f64>,
    amplitudes: Vec<f64>,
    phases: Vec<f64>,
    step_std: f64,
    out: PathBuf,
}

fn cmd_gen_data(mut args: GenDataArgs, file: GenDataArgs, seed: u64) -> Result<()> {
    let started = Instant::now();
    merge_opt!(args, file; system, n, dt, burn_in, noise, step_std, out);
    merge_vec!(args, file; periods, amplitudes, phases);

    let s = GenDataSettings {
        system: require(args.system, "--system")?,
        n: pick(args.n, 2048),
        dt: pick(args.dt, 0.01),
        burn_in: pick(args.burn_in, 1000),
        noise: pick(args.noise, 0.1),
        periods: if args.periods.is_empty() { vec![24.0] } else { args.periods },
        amplitudes: args.amplitudes,
        phases: args.phases,
        step_std: pick(args.step_std, 1.0),
        out: require(args.out, "--out")?,
    };
    if s.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }

    let series = match s.system {
        SystemKind::Lorenz | SystemKind::Thomas => {
            let system = match s.system {
                SystemKind::Lorenz => OdeSystem::lorenz_default(),
                _ => OdeSystem::thomas_default(),
            };
            let mut spec = OdeSpec::new(system, s.n);
            spec.dt = s.dt;
            spec.burn_in = s.burn_in;
            integrate_rk4(&spec)?
        }
        SystemKind::Seasonal => {
            let comps: Vec<Seasonal> = s
                .periods
                .iter()
                .enumerate()
                .map(|(i, &period)| Seasonal {
                    period,
                    amplitude: s.amplitudes.get(i).copied().unwrap_or(1.0),
                    phase: s.phases.get(i).copied().unwrap_or(0.0),
                })
                .collect();
            let mut rng = Rng::new(fan_out(seed, seed_offset::DATA));
            gen_seasonal(&mut rng, s.n, &comps, s.noise)?
        }
        SystemKind::Walk => {
            let mut rng = Rng::new(fan_out(seed, seed_offset::DATA));
            gen_random_walk(&mut rng, s.n, s.step_std)?
        }
    };

    let out = s.out.clone();
    let channels = series.channels;
    let points = series.len();
    Dataset { series: vec![series] }.save(&out)?;

    let manifest = RunManifest::new("gen-data", serde_json::to_value(&s)?, seed);
    finish_manifest(manifest, started, &[], &[&out], &out)?;
    println!("wrote {} ({points} points, {channels} channels)", out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSettings {
    data: PathBuf,
    out: PathBuf,
    config: ModelConfig,
    loss: LossKind,
    steps: usize,
    batch_size: usize,
    lr: f64,
    stride: usize,
}

fn cmd_train(mut args: TrainArgs, file: TrainArgs, seed: u64) -> Result<()> {
    let started = Instant::now();
    merge_opt!(args, file; data, out, arch, layers, heads, d_model, d_head, d_ff,
        context_len, horizon, vocab_size, patch_len, head, loss, steps, batch_size, lr, stride);

    let arch = pick(args.arch, ArchKind::EncoderDecoder);
    let mut cfg = match arch {
        ArchKind::EncoderDecoder => ModelConfig::chronos_toy(),
        ArchKind::DecoderOnly => ModelConfig::patch_toy(),
    };
    cfg.layers = pick(args.layers, cfg.layers);
    cfg.heads = pick(args.heads, cfg.heads);
    cfg.d_model = pick(args.d_model, cfg.d_model);
    cfg.d_head = pick(args.d_head, cfg.d_model / cfg.heads.max(1));
    cfg.d_ff = pick(args.d_ff, cfg.d_ff);
    cfg.context_len = pick(args.context_len, cfg.context_len);
    cfg.horizon = pick(args.horizon, cfg.horizon);
    match &mut cfg.arch {
        Arch::EncoderDecoder { tokenizer } => {
            tokenizer.vocab_size = pick(args.vocab_size, tokenizer.vocab_size);
        }
        Arch::DecoderOnly { patch, head } => {
            patch.patch_len = pick(args.patch_len, patch.patch_len);
            if let Some(h) = args.head {
                *head = match h {
                    HeadArg::Point => HeadKind::Point,
                    HeadArg::Quantile9 => HeadKind::Quantile9,
                };
            }
        }
    }
    cfg.validate()?;

    let default_loss = match (&cfg.arch, cfg.head_kind()) {
        (Arch::EncoderDecoder { .. }, _) => LossArg::Ce,
        (_, Some(HeadKind::Quantile9)) => LossArg::Pinball,
        _ => LossArg::Mse,
    };
    let s = TrainSettings {
        data: require(args.data, "--data")?,
        out: require(args.out, "--out")?,
        config: cfg,
        loss: pick(args.loss, default_loss).into(),
        steps: pick(args.steps, 300),
        batch_size: pick(args.batch_size, 8),
        lr: pick(args.lr, train::AdamConfig::default().lr),
        stride: pick(args.stride, 1),
    };
    if s.stride == 0 {
        return Err(Error::Config("--stride must be at least 1".into()));
    }

    let ds = Dataset::load(&s.data)?;
    let mut examples: Vec<TrainExample> = Vec::new();
    for series in &ds.series {
        for c in 0..series.channels {
            examples.extend(make_windows(
                &series.channel(c),
                s.config.context_len,
                s.config.horizon,
                s.stride,
            ));
        }
    }
    if examples.is_empty() {
        return Err(Error::Config(format!(
            "no training windows: every series is shorter than context {} + horizon {}",
            s.config.context_len, s.config.horizon
        )));
    }

    let mut init_rng = Rng::new(fan_out(seed, seed_offset::INIT));
    let mut bundle = init_weights(&s.config, &mut init_rng)?;
    let tc = TrainConfig {
        steps: s.steps,
        batch_size: s.batch_size,
        loss: s.loss,
        seed: fan_out(seed, seed_offset::TRAIN),
        adam: train::AdamConfig { lr: s.lr, ..Default::default() },
    };
    let report = train::train(&mut bundle, &examples, &tc)?;

    save_bundle(&bundle, &s.out)?;
    let curve_path = s.out.with_extension("loss_curve.csv");
    let rows: Vec<Vec<String>> = report
        .loss_curve
        .iter()
        .enumerate()
        .map(|(i, loss)| vec![i.to_string(), loss.to_string()])
        .collect();
    write_atomic(&curve_path, csv_body(&["step", "loss"], &rows).as_bytes())?;

    let manifest = RunManifest::new("train", serde_json::to_value(&s)?, seed);
    finish_manifest(manifest, started, &[&s.data], &[&s.out, &curve_path], &s.out)?;
    println!(
        "trained {} steps on {} windows ({}): loss {:.4} -> {:.4}",
        s.steps,
        examples.len(),
        s.loss.name(),
        report.initial_loss().unwrap_or(f64::NAN),
        report.final_loss().unwrap_or(f64::NAN),
    );
    println!("wrote {} and {}", s.out.display(), curve_path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ForecastSettings {
    model: PathBuf,
    data: PathBuf,
    out: PathBuf,
    eval: bool,
    season: usize,
}

/// One univariate forecasting task: a context and, under `--eval`, the
/// held-out actuals it should have predicted.
struct SeriesTask {
    name: String,
    context: TimeSeries,
    actual: Vec<f64>,
}

fn series_tasks(ds: &Dataset, horizon: usize, eval: bool) -> Result<Vec<SeriesTask>> {
    let mut tasks = Vec::new();
    for series in &ds.series {
        for c in 0..series.channels {
            let name = if series.channels == 1 {
                series.name.clone()
            } else {
                format!("{}.ch{c}", series.name)
            };
            let values = series.channel(c);
            if eval {
                if values.len() <= horizon {
                    return Err(Error::Config(format!(
                        "series {name} has {} points, too short to hold out {horizon}",
                        values.len()
                    )));
                }
                let split = values.len() - horizon;
                tasks.push(SeriesTask {
                    name,
                    context: TimeSeries::univariate("context", series.dt, values[..split].to_vec())?,
                    actual: values[split..].to_vec(),
                });
            } else {
                tasks.push(SeriesTask {
                    name,
                    context: TimeSeries::univariate("context", series.dt, values)?,
                    actual: Vec::new(),
                });
            }
        }
    }
    Ok(tasks)
}

fn cmd_forecast(mut args: ForecastArgs, file: ForecastArgs, seed: u64) -> Result<()> {
    let started = Instant::now();
    merge_opt!(args, file; model, data, out, season);
    args.eval = args.eval || file.eval;

    let s = ForecastSettings {
        model: require(args.model, "--model")?,
        data: require(args.data, "--data")?,
        out: require(args.out, "--out")?,
        eval: args.eval,
        season: pick(args.season, 1),
    };

    let bundle = load_bundle(&s.model)?;
    let ds = Dataset::load(&s.data)?;
    let tasks = series_tasks(&ds, bundle.config.horizon, s.eval)?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut metrics = MetricsReport::new(Aggregation::Geometric);
    for task in &tasks {
        let output = forecast(&bundle, &task.context, ForwardOptions::default())?;
        let values = output.forecast.channel(0);
        for (step, v) in values.iter().enumerate() {
            rows.push(vec![task.name.clone(), step.to_string(), v.to_string()]);
        }
        if s.eval {
            let insample = task.context.channel(0);
            metrics.push(
                &task.name,
                "mase",
                evalmetrics::mase(&values, &task.actual, &insample, s.season)?,
            );
            metrics.push(&task.name, "smape", evalmetrics::smape(&values, &task.actual)?);
            metrics.push(&task.name, "nrmse", evalmetrics::nrmse(&values, &task.actual)?);
            if let Some(q) = &output.quantiles {
                metrics.push(
                    &task.name,
                    "crps",
                    evalmetrics::crps_from_quantiles(&q.levels, &q.values, &task.actual)?,
                );
            }
        }
    }

    write_atomic(&s.out, csv_body(&["series", "step", "value"], &rows).as_bytes())?;
    let mut outputs: Vec<PathBuf> = vec![s.out.clone()];
    let metrics_path = s.out.with_extension("metrics.csv");
    if s.eval {
        write_atomic(&metrics_path, metrics.to_csv().as_bytes())?;
        outputs.push(metrics_path.clone());
    }

    let manifest = RunManifest::new("forecast", serde_json::to_value(&s)?, seed);
    let output_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    finish_manifest(manifest, started, &[&s.model, &s.data], &output_refs, &s.out)?;
    println!("forecast {} series -> {}", tasks.len(), s.out.display());
    if s.eval {
        println!("wrote {}", metrics_path.display());
    }
    Ok(())
}

/// Builds the evaluation set for sweeps: the last full context+horizon
/// window of every channel of every series.
fn eval_windows(ds: &Dataset, cfg: &ModelConfig) -> Result<Vec<TrainExample>> {
    let window = cfg.context_len + cfg.horizon;
    let mut examples = Vec::new();
    for series in &ds.series {
        for c in 0..series.channels {
            let values = series.channel(c);
            if values.len() >= window {
                let start = values.len() - window;
                examples.push(TrainExample {
                    context: values[start..start + cfg.context_len].to_vec(),
                    target: values[start + cfg.context_len..].to_vec(),
                });
            }
        }
    }
    if examples.is_empty() {
        return Err(Error::Config(format!(
            "no evaluation windows: every series is shorter than context {} + horizon {}",
            cfg.context_len, cfg.horizon
        )));
    }
    Ok(examples)
}

#[derive(Debug, Serialize)]
struct SweepSettings {
    model: PathBuf,
    data: PathBuf,
    out: PathBuf,
    group_size: usize,
    metric: ErrorMetric,
    season: usize,
    window: usize,
}

fn cmd_sweep_layers(mut args: SweepArgs, file: SweepArgs, seed: u64) -> Result<()> {
    let started = Instant::now();
    merge_opt!(args, file; model, data, out, group_size, metric, season, window);

    let s = SweepSettings {
        model: require(args.model, "--model")?,
        data: require(args.data, "--data")?,
        out: require(args.out, "--out")?,
        group_size: pick(args.group_size, 1),
        metric: pick(args.metric, MetricArg::Mase).into(),
        season: pick(args.season, 1),
        window: pick(args.window, evalmetrics::COMPARE_WINDOW),
    };

    let bundle = load_bundle(&s.model)?;
    let ds = Dataset::load(&s.data)?;
    let examples = eval_windows(&ds, &bundle.config)?;
    let ev = Evaluator::new(&bundle, &examples, s.metric, s.season)?;
    let sweep_cfg = SweepConfig { group_size: s.group_size, window: s.window, ..Default::default() };
    let report = ablate::layer_sweep(&ev, &sweep_cfg)?;

    write_atomic(&s.out, ablate::sweep_csv(&report).as_bytes())?;
    let manifest = RunManifest::new("sweep-layers", serde_json::to_value(&s)?, seed);
    finish_manifest(manifest, started, &[&s.model, &s.data], &[&s.out], &s.out)?;
    println!(
        "swept {} rows (baseline {} {:.6}) -> {}",
        report.rows.len(),
        report.metric,
        report.baseline_error,
        s.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct HeadsSettings {
    model: PathBuf,
    data: PathBuf,
    out: PathBuf,
    layer: usize,
    kind: AttnKind,
    orders: Vec<OrderArg>,
    metric: ErrorMetric,
    season: usize,
}

fn cmd_heads1pp(mut args: HeadsArgs, file: HeadsArgs, seed: u64) -> Result<()> {
    let started = Instant::now();
    merge_opt!(args, file; model, data, out, layer, kind, metric, season);
    merge_vec!(args, file; orders);

    let model = require(args.model, "--model")?;
    let bundle = load_bundle(&model)?;
    let default_kind =
        if bundle.config.is_encoder_decoder() { KindArg::Cross } else { KindArg::SelfAttn };
    let s = HeadsSettings {
        model,
        data: require(args.data, "--data")?,
        out: require(args.out, "--out")?,
        layer: require(args.layer, "--layer")?,
        kind: pick(args.kind, default_kind).into(),
        orders: if args.orders.is_empty() {
            vec![OrderArg::SrankDesc, OrderArg::SrankAsc]
        } else {
            args.orders
        },
        metric: pick(args.metric, MetricArg::Mase).into(),
        season: pick(args.season, 1),
    };

    let ds = Dataset::load(&s.data)?;
    let examples = eval_windows(&ds, &bundle.config)?;
    let ev = Evaluator::new(&bundle, &examples, s.metric, s.season)?;

    let mut results = Vec::new();
    for order in &s.orders {
        let strategy = match order {
            OrderArg::SrankDesc => OrderingStrategy::SrankDesc,
            OrderArg::SrankAsc => OrderingStrategy::SrankAsc,
            OrderArg::Random => {
                OrderingStrategy::Random { seed: fan_out(seed, seed_offset::ORDER) }
            }
        };
        let ordering = ablate::head_ordering(&bundle, s.layer, s.kind, strategy)?;
        let result = ablate::heads_at_1pp(&ev, &ordering)?;
        println!("layer {} {}: keep {}", s.layer, ordering.strategy.label(), result.k);
        results.push(result);
    }

    write_atomic(&s.out, ablate::heads_scan_csv(&results).as_bytes())?;
    let manifest = RunManifest::new("heads1pp", serde_json::to_value(&s)?, seed);
    finish_manifest(manifest, started, &[&s.model, &s.data], &[&s.out], &s.out)?;
    println!("wrote {}", s.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct LensSettings {
    model: PathBuf,
    data: PathBuf,
    out_dir: PathBuf,
    rrt_motif_len: usize,
    rrt_repeats: usize,
}

fn cmd_lens(mut args: LensArgs, file: LensArgs, seed: u64) -> Result<()> {
    let started = Instant::now();
    merge_opt!(args, file; model, data, out_dir, rrt_motif_len, rrt_repeats);

    let s = LensSettings {
        model: require(args.model, "--model")?,
        data: require(args.data, "--data")?,
        out_dir: require(args.out_dir, "--out-dir")?,
        rrt_motif_len: pick(args.rrt_motif_len, 8),
        rrt_repeats: pick(args.rrt_repeats, 4),
    };

    let bundle = load_bundle(&s.model)?;
    let ds = Dataset::load(&s.data)?;
    let context = ds
        .series
        .first()
        .ok_or_else(|| Error::Config("dataset has no series".into()))?
        .clone();
    std::fs::create_dir_all(&s.out_dir)?;

    let mut outputs: Vec<PathBuf> = Vec::new();
    let write = |name: &str, body: &[u8], outputs: &mut Vec<PathBuf>| -> Result<()> {
        let path = s.out_dir.join(name);
        write_atomic(&path, body)?;
        outputs.push(path);
        Ok(())
    };

    if bundle.config.is_encoder_decoder() {
        let map = lens::dla_logit_maps(&bundle, &context)?;
        write("logit_map.csv", lens::logit_map_csv(&map).as_bytes(), &mut outputs)?;

        let curve = lens::layer_entropy_curve(&map);
        let rows: Vec<Vec<String>> = curve
            .iter()
            .enumerate()
            .map(|(layer, h)| vec![layer.to_string(), h.to_string()])
            .collect();
        write(
            "entropy_curve.csv",
            csv_body(&["layer", "mean_entropy"], &rows).as_bytes(),
            &mut outputs,
        )?;

        let rollouts = lens::attention_rollouts(&bundle, &context)?;
        write("rollouts.csv", lens::rollout_csv(&rollouts).as_bytes(), &mut outputs)?;

        let mut profiles = lens::head_profiles(&bundle, &context)?;
        let probe = lens::rrt_test(
            &bundle,
            fan_out(seed, seed_offset::PROBE),
            s.rrt_motif_len,
            s.rrt_repeats,
        )?;
        lens::apply_rrt(&mut profiles, &probe);
        write("rrt.json", serde_json::to_string_pretty(&probe)?.as_bytes(), &mut outputs)?;

        let induction: Vec<bool> = profiles.iter().map(|p| p.induction == Some(true)).collect();
        let sharp: Vec<bool> =
            profiles.iter().map(|p| p.class == lens::Sharpness::Sharp).collect();
        let overlap = lens::overlap_table(&induction, &sharp)?;
        write("overlap.json", serde_json::to_string_pretty(&overlap)?.as_bytes(), &mut outputs)?;
        write(
            "head_profiles.json",
            serde_json::to_string_pretty(&profiles)?.as_bytes(),
            &mut outputs,
        )?;
    } else {
        let maps = lens::layer_forecast_maps(&bundle, &context)?;
        let mut rows: Vec<Vec<String>> = Vec::new();
        for (layer, map) in maps.iter().enumerate() {
            for step in 0..map.rows() {
                for (dim, v) in map.row(step).iter().enumerate() {
                    rows.push(vec![
                        layer.to_string(),
                        step.to_string(),
                        dim.to_string(),
                        v.to_string(),
                    ]);
                }
            }
        }
        write(
            "layer_outputs.csv",
            csv_body(&["layer", "step", "dim", "value"], &rows).as_bytes(),
            &mut outputs,
        )?;

        let rollouts = lens::self_attention_rollouts(&bundle, &context)?;
        write("rollouts.csv", lens::rollout_csv(&rollouts).as_bytes(), &mut outputs)?;
    }

    let kinds: &[AttnKind] = if bundle.config.is_encoder_decoder() {
        &[AttnKind::SelfAttn, AttnKind::CrossAttn]
    } else {
        &[AttnKind::SelfAttn]
    };
    let contexts = [context];
    let mut ranks = Vec::new();
    for layer in 0..bundle.config.layers {
        for &kind in kinds {
            ranks.push(lens::entropic_rank(&bundle, &contexts, layer, kind)?);
        }
    }
    write("entropic_rank.json", serde_json::to_string_pretty(&ranks)?.as_bytes(), &mut outputs)?;

    let primary = outputs[0].clone();
    let manifest = RunManifest::new("lens", serde_json::to_value(&s)?, seed);
    let inputs: Vec<&Path> = vec![&s.model, &s.data];
    let output_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    finish_manifest(manifest, started, &inputs, &output_refs, &primary)?;
    println!("wrote {} lens artifacts to {}", outputs.len(), s.out_dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct RrtSettings {
    model: PathBuf,
    out: PathBuf,
    motif_len: usize,
    repeats: usize,
}

fn cmd_rrt(mut args: RrtArgs, file: RrtArgs, seed: u64) -> Result<()> {
    let started = Instant::now();
    merge_opt!(args, file; model, out, motif_len, repeats);

    let s = RrtSettings {
        model: require(args.model, "--model")?,
        out: require(args.out, "--out")?,
        motif_len: pick(args.motif_len, 8),
        repeats: pick(args.repeats, 4),
    };

    let bundle = load_bundle(&s.model)?;
    let report =
        lens::rrt_test(&bundle, fan_out(seed, seed_offset::PROBE), s.motif_len, s.repeats)?;
    write_atomic(&s.out, serde_json::to_string_pretty(&report)?.as_bytes())?;

    let manifest = RunManifest::new("rrt", serde_json::to_value(&s)?, seed);
    finish_manifest(manifest, started, &[&s.model], &[&s.out], &s.out)?;
    let hits = report.induction_flags().iter().filter(|&&b| b).count();
    println!("scored {} heads, {hits} induction -> {}", report.scores.len(), s.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct VerifySettings {
    suites: Vec<SuiteArg>,
    out: Option<PathBuf>,
    bound_instances: usize,
    slope_checks: usize,
    tilt_cases: usize,
    nw_cases: usize,
    grad_samples: Option<usize>,
}

struct SuiteOutcome {
    name: &'static str,
    summary: String,
    failures: Vec<String>,
}

impl SuiteOutcome {
    fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

fn cmd_verify(mut args: VerifyArgs, file: VerifyArgs, seed: u64) -> Result<i32> {
    let started = Instant::now();
    merge_opt!(args, file; out, bound_instances, slope_checks, tilt_cases, nw_cases, grad_samples);
    merge_vec!(args, file; suites);

    let s = VerifySettings {
        suites: if args.suites.is_empty() { vec![SuiteArg::All] } else { args.suites },
        out: args.out,
        bound_instances: pick(args.bound_instances, 1000),
        slope_checks: pick(args.slope_checks, 20),
        tilt_cases: pick(args.tilt_cases, 200),
        nw_cases: pick(args.nw_cases, 500),
        grad_samples: args.grad_samples,
    };
    let all = s.suites.contains(&SuiteArg::All);
    let selected = |which: SuiteArg| all || s.suites.contains(&which);
    if s.out.is_some() && !selected(SuiteArg::Bound) {
        return Err(Error::Config("--out records the bound suite; include it in --suite".into()));
    }

    let suite_seed = fan_out(seed, seed_offset::SUITE);
    let mut outcomes: Vec<SuiteOutcome> = Vec::new();

    if selected(SuiteArg::Kernel) {
        outcomes.push(suite_kernel(s.tilt_cases, s.nw_cases, suite_seed)?);
    }
    if selected(SuiteArg::Bound) {
        let (outcome, suite) = suite_bound(s.bound_instances, s.slope_checks, suite_seed)?;
        if let Some(out) = &s.out {
            write_atomic(out, serde_json::to_string_pretty(&suite)?.as_bytes())?;
            let manifest = RunManifest::new("verify", serde_json::to_value(&s)?, seed);
            finish_manifest(manifest, started, &[], &[out.as_path()], out)?;
        }
        outcomes.push(outcome);
    }
    if selected(SuiteArg::Gradients) {
        outcomes.push(suite_gradients(s.grad_samples, seed)?);
    }
    if selected(SuiteArg::Metrics) {
        outcomes.push(suite_metrics()?);
    }

    let mut failed = 0;
    for outcome in &outcomes {
        if outcome.pass() {
            println!("verify {}: ok ({})", outcome.name, outcome.summary);
        } else {
            failed += 1;
            println!("verify {}: FAIL ({})", outcome.name, outcome.summary);
            for line in &outcome.failures {
                println!("  {line}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} suite(s) failed");
        return Ok(1);
    }
    println!("all suites passed");
    Ok(0)
}

fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.next_gaussian()).collect()
}

/// Identity checks: the SVD tilt factorization against the direct softmax,
/// and equal-norm attention against the Gaussian kernel smoother.
fn suite_kernel(tilt_cases: usize, nw_cases: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut failures = Vec::new();

    let mut max_tilt: f64 = 0.0;
    for case in 0..tilt_cases {
        let mut rng = Rng::new(seed.wrapping_add(case as u64));
        let d = 2 + rng.next_below(31);
        let c = 2 + rng.next_below(63);
        let head = SpectralHead::new(Matrix::gaussian(d, d, 1.0, &mut rng), d)?;
        let q = gaussian_vec(&mut rng, d);
        let keys: Vec<Vec<f64>> = (0..c).map(|_| gaussian_vec(&mut rng, d)).collect();

        let tilt = kernel::tilt_factorization(&head, &q, &keys)?;
        let mut direct: Vec<f64> = keys.iter().map(|k| head.score(&q, k)).collect();
        softmax_in_place(&mut direct, 1.0);
        let dev = tilt
            .iter()
            .zip(&direct)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        max_tilt = max_tilt.max(dev);
        if dev >= 1e-10 {
            failures.push(format!("tilt case {case} (d={d}, c={c}): deviation {dev:.3e}"));
        }
    }

    let mut max_nw: f64 = 0.0;
    for case in 0..nw_cases {
        let mut rng = Rng::new(seed.wrapping_add(0x10_0000 + case as u64));
        let d = 1 + rng.next_below(16);
        let c = 2 + rng.next_below(32);
        let q = gaussian_vec(&mut rng, d);
        let keys: Vec<Vec<f64>> = (0..c).map(|_| gaussian_vec(&mut rng, d)).collect();
        let radius = rng.range_f64(0.5, 2.0);
        let equal = kernel::rescale_to_norm(&keys, radius)?;

        let dev = kernel::attention_vs_nw(&q, &equal, d)?;
        max_nw = max_nw.max(dev);
        if dev >= 1e-10 {
            failures.push(format!("kernel case {case} (d={d}, c={c}): deviation {dev:.3e}"));
        }
    }

    Ok(SuiteOutcome {
        name: "kernel",
        summary: format!(
            "{tilt_cases} factorizations max dev {max_tilt:.2e}, {nw_cases} smoother matches max dev {max_nw:.2e}"
        ),
        failures,
    })
}

/// Concentration bound on sampled instances, all assumptions re-measured,
/// plus the large-beta log-slope comparison.
fn suite_bound(
    instances: usize,
    slope_checks: usize,
    seed: u64,
) -> Result<(SuiteOutcome, kernel::BoundSuite)> {
    let suite = kernel::run_bound_suite(instances, seed)?;
    let mut failures = Vec::new();
    for row in &suite.rows {
        if !row.assumptions_ok || row.slack < 0.0 {
            failures.push(format!(
                "seed {} ({}): lhs {:.3e} rhs_truncated {:.3e} slack {:.3e} assumptions_ok={}",
                row.seed, row.family, row.lhs, row.rhs_truncated, row.slack, row.assumptions_ok
            ));
        }
    }
    if suite.violations > 0 || suite.rank_sweep_violations > 0 {
        failures.push(format!(
            "{} violations, {} rank-sweep violations",
            suite.violations, suite.rank_sweep_violations
        ));
    }

    let mut slope_ok = 0;
    for i in 0..slope_checks {
        let family =
            if i % 2 == 0 { InstanceFamily::ZeroTail } else { InstanceFamily::MeasuredTail };
        let inst = kernel::sample_instance(seed.wrapping_add(0x51_0000 + i as u64), family)?;
        let check = kernel::log_slope_check(&inst)?;
        if check.ok {
            slope_ok += 1;
        } else {
            failures.push(format!(
                "slope check {i} ({}): lhs slope {:.6} rhs slope {:.6}",
                family.label(),
                check.slope_lhs,
                check.slope_rhs
            ));
        }
    }

    let outcome = SuiteOutcome {
        name: "bound",
        summary: format!(
            "{} instances, {} rank-sweep checks, {slope_ok}/{slope_checks} slope fits",
            suite.instances, suite.rank_sweep_checks
        ),
        failures,
    };
    Ok((outcome, suite))
}

fn grad_check_config(arch: ArchKind, head: HeadKind) -> ModelConfig {
    let mut cfg = match arch {
        ArchKind::EncoderDecoder => ModelConfig::chronos_toy(),
        ArchKind::DecoderOnly => ModelConfig::patch_toy(),
    };
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.d_model = 16;
    cfg.d_head = 8;
    cfg.d_ff = 32;
    cfg.context_len = 32;
    cfg.horizon = 8;
    match &mut cfg.arch {
        Arch::EncoderDecoder { tokenizer } => tokenizer.vocab_size = 32,
        Arch::DecoderOnly { patch, head: h } => {
            patch.patch_len = 4;
            *h = head;
        }
    }
    cfg
}

/// Central-difference check over both architectures and all three losses.
fn suite_gradients(samples_per_tensor: Option<usize>, seed: u64) -> Result<SuiteOutcome> {
    let combos: [(ArchKind, HeadKind, LossKind, &str); 3] = [
        (ArchKind::EncoderDecoder, HeadKind::Point, LossKind::CrossEntropy, "token/ce"),
        (ArchKind::DecoderOnly, HeadKind::Point, LossKind::Mse, "patch/mse"),
        (ArchKind::DecoderOnly, HeadKind::Quantile9, LossKind::Pinball, "patch/pinball"),
    ];

    let mut failures = Vec::new();
    let mut parts = Vec::new();
    for (i, (arch, head, loss, label)) in combos.into_iter().enumerate() {
        let cfg = grad_check_config(arch, head);
        let mut init_rng = Rng::new(fan_out(seed, seed_offset::INIT).wrapping_add(i as u64));
        let bundle = init_weights(&cfg, &mut init_rng)?;

        let mut data_rng = Rng::new(fan_out(seed, seed_offset::DATA).wrapping_add(i as u64));
        let comps = [Seasonal { period: 16.0, amplitude: 1.0, phase: 0.3 }];
        let series = gen_seasonal(&mut data_rng, 88, &comps, 0.05)?;
        let windows = make_windows(&series.channel(0), cfg.context_len, cfg.horizon, 40);
        let batch: Vec<&TrainExample> = windows.iter().take(2).collect();
        if batch.is_empty() {
            return Err(Error::Config("gradient suite produced no windows".into()));
        }

        let gc = check_gradients(
            &bundle,
            &batch,
            loss,
            samples_per_tensor,
            fan_out(seed, seed_offset::SUITE),
        )?;
        parts.push(format!("{label} {} params max rel {:.1e}", gc.checked, gc.max_rel_err));
        if !gc.passes() {
            failures.push(format!(
                "{label}: max rel err {:.3e} at {} (tolerance {:.0e})",
                gc.max_rel_err,
                gc.worst_param,
                train::GRAD_CHECK_TOL
            ));
        }
    }

    Ok(SuiteOutcome { name: "gradients", summary: parts.join("; "), failures })
}

/// Fixed-value convention checks on the metric implementations.
fn suite_metrics() -> Result<SuiteOutcome> {
    let mut failures = Vec::new();

    let inc = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let dec = [6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
    let constant = [2.5; 6];
    let d = evalmetrics::spearman_distance(&constant, &inc)?;
    if d != 1.0 {
        failures.push(format!("constant-series rank distance: {d} != 1"));
    }
    let d = evalmetrics::spearman_distance(&inc, &dec)?;
    if (d - 2.0).abs() > 1e-12 {
        failures.push(format!("reversed-series rank distance: {d} != 2"));
    }

    let forecast = [3.0, 1.0, 4.0, 1.5];
    let actual = [2.0, 2.0, 3.0, 2.5];
    let insample = [1.0, 3.0, 2.0, 5.0, 4.0, 2.0];
    let base = evalmetrics::mase(&forecast, &actual, &insample, 1)?.value.unwrap();
    let scale = 3.7;
    let scaled = evalmetrics::mase(
        &forecast.map(|v| v * scale),
        &actual.map(|v| v * scale),
        &insample.map(|v| v * scale),
        1,
    )?
    .value
    .unwrap();
    if (base - scaled).abs() > 1e-12 * base.abs() {
        failures.push(format!("scaled error not scale-invariant: {base} vs {scaled}"));
    }

    let q = Matrix::from_rows(&[vec![1.0], vec![5.0], vec![2.0]])?;
    let crps = evalmetrics::crps_from_quantiles(&[0.5], &q, &[2.0, 3.0, 2.0])?.value.unwrap();
    if (crps - 3.0 / 7.0).abs() > 1e-12 {
        failures.push(format!("median-level crps {crps} != 3/7"));
    }

    let mut induction = vec![false; 144];
    let mut sharp = vec![false; 144];
    for flag in induction.iter_mut().take(12) {
        *flag = true;
    }
    for flag in sharp.iter_mut().take(2) {
        *flag = true;
    }
    for flag in sharp.iter_mut().skip(12).take(8) {
        *flag = true;
    }
    let table = lens::overlap_table(&induction, &sharp)?;
    let p_si = table.p_sharp_given_induction.unwrap_or(f64::NAN);
    let p_is = table.p_induction_given_sharp.unwrap_or(f64::NAN);
    if (p_si - 1.0 / 6.0).abs() > 1e-12 || format!("{p_si:.4}") != "0.1667" {
        failures.push(format!("P(sharp|induction) {p_si} != 1/6"));
    }
    if (p_is - 0.2).abs() > 1e-12 || format!("{p_is:.4}") != "0.2000" {
        failures.push(format!("P(induction|sharp) {p_is} != 1/5"));
    }

    Ok(SuiteOutcome {
        name: "metrics",
        summary: "rank-distance conventions, scale invariance, median-level crps, overlap arithmetic"
            .into(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn path_str(p: &Path) -> String {
        p.to_str().unwrap().to_string()
    }

    #[test]
    fn gen_data_requires_out() {
        let code = run_from(["tsfm-lens", "gen-data", "--system", "lorenz"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let code = run_from(["tsfm-lens", "gen-data", "--no-such-flag"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run_from(["tsfm-lens", "--help"]), 0);
    }

    #[test]
    fn lorenz_generation_is_seed_reproducible() {
        let dir = tmp();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        for out in [&a, &b] {
            let code = run_from([
                "tsfm-lens",
                "gen-data",
                "--system",
                "lorenz",
                "--n",
                "128",
                "--seed",
                "7",
                "--out",
                &path_str(out),
            ]);
            assert_eq!(code, 0);
        }
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let ds = Dataset::load(&a).unwrap();
        assert_eq!(ds.series[0].channels, 3);
        assert_eq!(ds.series[0].len(), 128);
    }

    #[test]
    fn noiseless_seasonal_matches_the_analytic_curve() {
        let dir = tmp();
        let out = dir.path().join("s.json");
        let code = run_from([
            "tsfm-lens",
            "gen-data",
            "--system",
            "seasonal",
            "--n",
            "64",
            "--noise",
            "0",
            "--period",
            "16",
            "--amplitude",
            "2",
            "--phase",
            "0.5",
            "--out",
            &path_str(&out),
        ]);
        assert_eq!(code, 0);
        let ds = Dataset::load(&out).unwrap();
        let values = ds.series[0].channel(0);
        for (t, &v) in values.iter().enumerate() {
            let expect = 2.0 * (2.0 * std::f64::consts::PI * t as f64 / 16.0 + 0.5).sin();
            assert!((v - expect).abs() < 1e-12, "t={t}: {v} vs {expect}");
        }
    }

    #[test]
    fn manifest_lands_beside_the_artifact() {
        let dir = tmp();
        let out = dir.path().join("walk.json");
        let code = run_from([
            "tsfm-lens", "gen-data", "--system", "walk", "--n", "32", "--out",
            &path_str(&out),
        ]);
        assert_eq!(code, 0);
        let manifest_file = dir.path().join("walk.json.manifest.json");
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_file).unwrap()).unwrap();
        assert_eq!(manifest.command, "gen-data");
        assert_eq!(manifest.seed, DEFAULT_SEED);
        assert_eq!(manifest.outputs.len(), 1);
        assert_eq!(manifest.outputs[0].sha256.len(), 64);
    }

    #[test]
    fn config_file_drives_gen_data_and_flags_win() {
        let dir = tmp();
        let from_config = dir.path().join("cfg.json");
        let config = dir.path().join("config.json");
        std::fs::write(
            &config,
            serde_json::json!({
                "seed": 11,
                "gen_data": {"system": "walk", "n": 40, "out": path_str(&from_config)}
            })
            .to_string(),
        )
        .unwrap();

        let code = run_from(["tsfm-lens", "gen-data", "--config", &path_str(&config)]);
        assert_eq!(code, 0);
        assert_eq!(Dataset::load(&from_config).unwrap().series[0].len(), 40);

        let override_out = dir.path().join("override.json");
        let code = run_from([
            "tsfm-lens",
            "gen-data",
            "--config",
            &path_str(&config),
            "--n",
            "24",
            "--out",
            &path_str(&override_out),
        ]);
        assert_eq!(code, 0);
        assert_eq!(Dataset::load(&override_out).unwrap().series[0].len(), 24);
    }

    #[test]
    fn config_file_typos_are_usage_errors() {
        let dir = tmp();
        let config = dir.path().join("config.json");
        std::fs::write(&config, r#"{"gen_dataa": {}}"#).unwrap();
        let code = run_from([
            "tsfm-lens", "gen-data", "--system", "walk", "--out", "x.json", "--config",
            &path_str(&config),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn missing_dataset_file_exits_two() {
        let code = run_from([
            "tsfm-lens",
            "train",
            "--data",
            "/nonexistent/nope.json",
            "--out",
            "/nonexistent/model.json",
        ]);
        assert_eq!(code, 2);
    }

    fn train_tiny_model(dir: &Path) -> (PathBuf, PathBuf) {
        let data = dir.join("data.json");
        let code = run_from([
            "tsfm-lens", "gen-data", "--system", "seasonal", "--n", "160", "--period", "8",
            "--noise", "0.05", "--seed", "3", "--out", &path_str(&data),
        ]);
        assert_eq!(code, 0);
        let model = dir.join("model.json");
        let code = run_from([
            "tsfm-lens",
            "train",
            "--data",
            &path_str(&data),
            "--out",
            &path_str(&model),
            "--layers",
            "1",
            "--heads",
            "2",
            "--d-model",
            "16",
            "--d-ff",
            "32",
            "--context-len",
            "24",
            "--horizon",
            "8",
            "--vocab-size",
            "32",
            "--steps",
            "5",
            "--batch-size",
            "4",
            "--seed",
            "3",
        ]);
        assert_eq!(code, 0);
        (data, model)
    }

    #[test]
    fn train_writes_model_loss_curve_and_manifest() {
        let dir = tmp();
        let (_, model) = train_tiny_model(dir.path());
        let bundle = load_bundle(&model).unwrap();
        assert_eq!(bundle.config.layers, 1);
        assert_eq!(bundle.config.d_head, 8);

        let curve = std::fs::read_to_string(dir.path().join("model.loss_curve.csv")).unwrap();
        let mut lines = curve.lines();
        assert_eq!(lines.next(), Some("step,loss"));
        assert!(lines.count() >= 5);

        let manifest: RunManifest = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("model.json.manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest.command, "train");
        assert_eq!(manifest.inputs.len(), 1);
        assert_eq!(manifest.outputs.len(), 2);
    }

    #[test]
    fn forecast_and_sweep_and_heads_write_stable_reports() {
        let dir = tmp();
        let (data, model) = train_tiny_model(dir.path());

        let fc = dir.path().join("forecast.csv");
        let code = run_from([
            "tsfm-lens", "forecast", "--model", &path_str(&model), "--data", &path_str(&data),
            "--eval", "--out", &path_str(&fc),
        ]);
        assert_eq!(code, 0);
        let body = std::fs::read_to_string(&fc).unwrap();
        assert!(body.starts_with("series,step,value\n"));
        assert_eq!(body.lines().count(), 9);
        let metrics = std::fs::read_to_string(dir.path().join("forecast.metrics.csv")).unwrap();
        assert!(metrics.starts_with("series,metric,value,flags\n"));
        assert!(metrics.contains("mase"));

        let sweep = dir.path().join("sweep.csv");
        let code = run_from([
            "tsfm-lens", "sweep-layers", "--model", &path_str(&model), "--data",
            &path_str(&data), "--out", &path_str(&sweep), "--seed", "3",
        ]);
        assert_eq!(code, 0);
        let body = std::fs::read_to_string(&sweep).unwrap();
        // control row + 1 layer x 3 targets
        assert_eq!(body.lines().count(), 5);

        let heads = dir.path().join("heads.csv");
        let code = run_from([
            "tsfm-lens", "heads1pp", "--model", &path_str(&model), "--data", &path_str(&data),
            "--layer", "0", "--out", &path_str(&heads), "--seed", "3",
        ]);
        assert_eq!(code, 0);
        let body = std::fs::read_to_string(&heads).unwrap();
        assert!(body.lines().count() >= 3);
        assert!(body.contains("srank_desc") && body.contains("srank_asc"));
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tmp();
        let (data, model) = train_tiny_model(dir.path());
        let out = dir.path().join("sweep.csv");

        let mut bodies = Vec::new();
        for _ in 0..2 {
            let code = run_from([
                "tsfm-lens", "sweep-layers", "--model", &path_str(&model), "--data",
                &path_str(&data), "--out", &path_str(&out), "--seed", "9",
            ]);
            assert_eq!(code, 0);
            bodies.push(std::fs::read(&out).unwrap());
        }
        assert_eq!(bodies[0], bodies[1]);
    }

    #[test]
    fn lens_emits_the_full_artifact_set_for_the_token_model() {
        let dir = tmp();
        let (data, model) = train_tiny_model(dir.path());
        let lens_dir = dir.path().join("lens");
        let code = run_from([
            "tsfm-lens", "lens", "--model", &path_str(&model), "--data", &path_str(&data),
            "--out-dir", &path_str(&lens_dir), "--rrt-motif-len", "4", "--rrt-repeats", "3",
            "--seed", "3",
        ]);
        assert_eq!(code, 0);
        for name in [
            "logit_map.csv",
            "entropy_curve.csv",
            "rollouts.csv",
            "rrt.json",
            "overlap.json",
            "head_profiles.json",
            "entropic_rank.json",
            "logit_map.csv.manifest.json",
        ] {
            assert!(lens_dir.join(name).exists(), "missing {name}");
        }
        let ranks: Vec<lens::EntropicRank> = serde_json::from_str(
            &std::fs::read_to_string(lens_dir.join("entropic_rank.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(ranks.len(), 2);
    }

    #[test]
    fn rrt_report_is_seed_stable() {
        let dir = tmp();
        let (_, model) = train_tiny_model(dir.path());
        let out = dir.path().join("rrt.json");
        let mut bodies = Vec::new();
        for _ in 0..2 {
            let code = run_from([
                "tsfm-lens", "rrt", "--model", &path_str(&model), "--motif-len", "4",
                "--repeats", "3", "--seed", "5", "--out", &path_str(&out),
            ]);
            assert_eq!(code, 0);
            bodies.push(std::fs::read(&out).unwrap());
        }
        assert_eq!(bodies[0], bodies[1]);
        let report: lens::RrtReport = serde_json::from_slice(&bodies[0]).unwrap();
        assert_eq!(report.motif_len, 4);
        assert_eq!(report.scores.len(), 2);
    }

    #[test]
    fn verify_metrics_suite_passes() {
        let code = run_from(["tsfm-lens", "verify", "--suite", "metrics"]);
        assert_eq!(code, 0);
    }

    #[test]
    fn verify_small_kernel_and_bound_slices_pass() {
        let code = run_from([
            "tsfm-lens", "verify", "--suite", "kernel", "--suite", "bound", "--tilt-cases",
            "10", "--nw-cases", "10", "--bound-instances", "8", "--slope-checks", "2",
        ]);
        assert_eq!(code, 0);
    }

    #[test]
    fn verify_writes_the_bound_report() {
        let dir = tmp();
        let out = dir.path().join("bound.json");
        let code = run_from([
            "tsfm-lens", "verify", "--suite", "bound", "--bound-instances", "4",
            "--slope-checks", "0", "--out", &path_str(&out),
        ]);
        assert_eq!(code, 0);
        let suite: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(suite["instances"], 4);
        assert_eq!(suite["violations"], 0);
        assert_eq!(suite["rows"].as_array().unwrap().len(), 4);
        assert!(suite["rows"][0]["rhs_truncated"].is_number());
        assert!(dir.path().join("bound.json.manifest.json").exists());
    }

    #[test]
    fn verify_out_without_bound_suite_is_a_usage_error() {
        let code = run_from([
            "tsfm-lens", "verify", "--suite", "metrics", "--out", "/tmp/nope.json",
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn gradient_suite_passes_on_sampled_parameters() {
        let outcome = suite_gradients(Some(3), 42).unwrap();
        assert!(outcome.pass(), "failures: {:?}", outcome.failures);
    }

    #[test]
    fn seed_fan_out_is_fixed() {
        assert_eq!(fan_out(10, seed_offset::DATA), 10);
        assert_eq!(fan_out(10, seed_offset::INIT), 11);
        assert_eq!(fan_out(10, seed_offset::TRAIN), 12);
        assert_eq!(fan_out(u64::MAX, seed_offset::INIT), 0);
    }
}

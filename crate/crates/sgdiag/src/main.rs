//! Command-line driver. Six subcommands cover the workflow: `diagnose`
//! runs one constant-rate chain and reports whether the convergence
//! detector fired; `sgd-half` runs the rate-halving scheme; `region` maps
//! the detector's activation region and the empirically occupied region;
//! `table1` runs the detector-quality study; `compare` and `benchmark`
//! race the halving method against tuned baselines on simulated and file
//! data.
//!
//! Exit codes: 0 success (including a successful detection), 2 usage or
//! configuration error, 3 the detector did not activate, 4 the chain
//! diverged. Option precedence is flags, then `--config` file entries
//! (`key=value` lines, keys named like the long flags), then defaults.
//! Every run writes its outputs and a `run_manifest.json` with the fully
//! resolved configuration into `--out-dir`. Given the same seed, outputs
//! are byte-identical across runs and thread counts.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use sgdiag::diagnostic::DiagnosticMonitor;
use sgdiag::engine::{run_chain, ResampledStream, RunTrace, Schedule, SgdConfig, UpdateKind};
use sgdiag::error::{Result, SgdiagError};
use sgdiag::generate::PointGenerator;
use sgdiag::halving::{run_sgd_half, HalvingConfig};
use sgdiag::harness::compare::{
    compare_methods, default_tuning_grid, CompareConfig, EvalMetric, Method, MethodCurve,
};
use sgdiag::harness::data::{load_benchmark, subsample, FileFormat, LabelRule};
use sgdiag::harness::diag_eval::{evaluate_diagnostic, EvalProtocol};
use sgdiag::harness::ols::significance_stars;
use sgdiag::harness::report::{atomic_write, write_csv, RunManifest};
use sgdiag::harness::sim::{draw_theta0, simulate_dataset, SimModelKind, SimSpec};
use sgdiag::model::{DataPoint, LossModel};
use sgdiag::region::{
    empirical_convergence_region, map_drift_region, pooled_iterate_projections, CellClass,
    GaussianLinearGen, GridSpec, LogisticGen,
};

#[derive(Parser)]
#[command(
    name = "sgdiag",
    version,
    about = "Constant-rate SGD with an online convergence detector: diagnosis, rate halving, region analysis, and benchmarks"
)]
struct Cli {
    /// Directory for output files (created if missing)
    #[arg(long, global = true, env = "SGDIAG_OUT_DIR", value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores)
    #[arg(long, global = true, env = "SGDIAG_WORKERS", value_name = "N")]
    workers: Option<usize>,
    /// Config file with key=value lines; flags take precedence over it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one SGD chain and report when the convergence detector fires
    Diagnose(DiagnoseArgs),
    /// Run SGD with automatic rate halving driven by the detector
    SgdHalf(SgdHalfArgs),
    /// Map where the detector statistic drifts negative, against where the
    /// iterates actually settle
    Region(RegionArgs),
    /// Detector-quality study: regress the error at tau/2 and 2*tau on the
    /// starting error across many chains per learning rate
    Table1(Table1Args),
    /// Compare the halving method against tuned baselines on simulated data
    Compare(CompareArgs),
    /// Compare the same methods on a dataset file with a held-out split
    Benchmark(BenchmarkArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Normal,
    Logistic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Libsvm,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum UpdateArg {
    Implicit,
    Explicit,
}

#[derive(Args, Debug)]
struct SourceArgs {
    /// Simulated problem, e.g. "p=20,n=5000,sigma=3" (keys p, n, sigma,
    /// snr, sigma0; empty string for all defaults)
    #[arg(long, value_name = "SPEC")]
    simulate: Option<String>,
    /// Read observations from a file instead of simulating
    #[arg(long, value_name = "FILE", conflicts_with = "simulate")]
    data: Option<PathBuf>,
    /// Format of the data file
    #[arg(long, value_enum, requires = "data")]
    format: Option<FormatArg>,
    /// Label handling for data files: raw, binary01, plus-minus, K-vs-rest, le:K
    #[arg(long, value_name = "RULE", requires = "data")]
    label_rule: Option<String>,
    /// Label column name for CSV files (default: y)
    #[arg(long, value_name = "NAME", requires = "data")]
    label_column: Option<String>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Model family for the loss (default: normal when simulating, by
    /// label rule for files)
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Constant learning rate (default: 0.02)
    #[arg(long)]
    gamma: Option<f64>,
    /// Detector burn-in in iterations (default: a tenth of the dataset)
    #[arg(long)]
    burnin: Option<u64>,
    /// Update rule (default: implicit)
    #[arg(long, value_enum)]
    update: Option<UpdateArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop without a detection after this many iterations (default: 10
    /// passes)
    #[arg(long)]
    max_iterations: Option<u64>,
    /// Record every k-th iteration in the trace (default: 10)
    #[arg(long)]
    trace_stride: Option<u64>,
}

#[derive(Args, Debug)]
struct SgdHalfArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Starting learning rate (default: 0.5)
    #[arg(long)]
    gamma0: Option<f64>,
    /// Nominal iteration budget; termination needs the rate below the
    /// floor and this many iterations done (required)
    #[arg(long)]
    maxit: Option<u64>,
    /// Stop once the rate falls below this (default: 1e-8)
    #[arg(long)]
    gamma_floor: Option<f64>,
    /// Rate multiplier at each detection (default: 0.5)
    #[arg(long)]
    halving_factor: Option<f64>,
    /// Detector burn-in after each halving (default: a tenth of maxit)
    #[arg(long)]
    burnin: Option<u64>,
    /// Hard stop after this many iterations
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long, value_enum)]
    update: Option<UpdateArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trace_stride: Option<u64>,
}

#[derive(Args, Debug)]
struct RegionArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Grid "axis1,axis2,min1,max1,min2,max2,res" over two coordinates of
    /// the parameter (required)
    #[arg(long, value_name = "SPEC")]
    grid: Option<String>,
    /// Fresh two-step replicates per grid cell (default: 200)
    #[arg(long)]
    reps: Option<u64>,
    /// Constant learning rate (default: 0.02)
    #[arg(long)]
    gamma: Option<f64>,
    /// Chains pooled for the empirical region (default: 8)
    #[arg(long)]
    chains: Option<u64>,
    /// Steps per chain (default: 2000)
    #[arg(long)]
    steps: Option<u64>,
    /// Fraction of each chain discarded as burn-in (default: 0.5)
    #[arg(long)]
    burn_frac: Option<f64>,
    /// Fraction of pooled iterates the trimmed box must hold (default: 0.9)
    #[arg(long)]
    coverage: Option<f64>,
    #[arg(long, value_enum)]
    update: Option<UpdateArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct Table1Args {
    /// Comma-separated learning rates (default: 0.0005 doubling to 0.064)
    #[arg(long, value_name = "LIST")]
    gammas: Option<String>,
    /// Independent chains per rate (default: 100)
    #[arg(long)]
    runs: Option<usize>,
    /// Parameter dimension (default: 20)
    #[arg(long)]
    p: Option<usize>,
    /// Observations per dataset (default: 5000)
    #[arg(long)]
    n: Option<usize>,
    /// Residual standard deviation (default: 3)
    #[arg(long)]
    sigma: Option<f64>,
    /// Signal-to-noise ratio, an alternative to --sigma
    #[arg(long, conflicts_with = "sigma")]
    snr: Option<f64>,
    /// Starting-point spread around the truth (default: 2)
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Detector burn-in as a fraction of n (default: 0.1)
    #[arg(long)]
    burnin_frac: Option<f64>,
    /// Nominal horizon in passes (default: 4)
    #[arg(long)]
    horizon_passes: Option<usize>,
    #[arg(long, value_enum)]
    update: Option<UpdateArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Effective passes granted to every method (default: 10)
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, conflicts_with = "sigma")]
    snr: Option<f64>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Comma-separated subset of isgd-half, svrg, classical-isgd,
    /// averaged-isgd (default: all)
    #[arg(long, value_name = "LIST")]
    methods: Option<String>,
    /// Comma-separated tuning grid for the baselines (default: 0.001
    /// doubling to 1.024)
    #[arg(long, value_name = "LIST")]
    tuning_grid: Option<String>,
    /// Starting rate of the halving method (default: 0.256)
    #[arg(long)]
    gamma0: Option<f64>,
    /// Detector burn-in of the halving method (default: half the dataset)
    #[arg(long)]
    halving_burnin: Option<u64>,
    #[arg(long)]
    halving_factor: Option<f64>,
    /// Error evaluations per pass (default: 2)
    #[arg(long)]
    evals_per_pass: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Dataset file
    #[arg(long, required = true)]
    data: PathBuf,
    #[arg(long, value_enum, required = true)]
    format: FormatArg,
    /// Label handling: raw, binary01, plus-minus, K-vs-rest, le:K
    /// (default: binary01)
    #[arg(long, value_name = "RULE")]
    label_rule: Option<String>,
    #[arg(long, value_name = "NAME")]
    label_column: Option<String>,
    /// Cap the training split at this many rows
    #[arg(long)]
    subsample: Option<usize>,
    /// Effective passes granted to every method (default: 10)
    #[arg(long)]
    passes: Option<usize>,
    /// Held-out fraction (default: 0.2)
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long, value_name = "LIST")]
    methods: Option<String>,
    #[arg(long, value_name = "LIST")]
    tuning_grid: Option<String>,
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    halving_burnin: Option<u64>,
    #[arg(long)]
    halving_factor: Option<f64>,
    #[arg(long)]
    evals_per_pass: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

// --- option resolution -----------------------------------------------------

struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| SgdiagError::Parse {
                    line: i + 1,
                    msg: format!("expected key=value, got '{line}'"),
                })?;
                map.insert(k.trim().replace('-', "_"), v.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(s) => s.parse().map(Some).map_err(|e| {
                SgdiagError::InvalidConfig(format!("config key {key}={s}: {e}"))
            }),
        }
    }
}

fn resolve<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T>
where
    T::Err: Display,
{
    Ok(match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(default),
    })
}

fn resolve_opt<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    Ok(match flag {
        Some(v) => Some(v),
        None => file.get(key)?,
    })
}

fn resolve_update(flag: Option<UpdateArg>, file: &FileConfig) -> Result<UpdateKind> {
    let kind = match flag {
        Some(UpdateArg::Implicit) => UpdateKind::Implicit,
        Some(UpdateArg::Explicit) => UpdateKind::Explicit,
        None => match file.0.get("update").map(String::as_str) {
            None => UpdateKind::Implicit,
            Some("implicit") => UpdateKind::Implicit,
            Some("explicit") => UpdateKind::Explicit,
            Some(other) => {
                return Err(SgdiagError::InvalidConfig(format!(
                    "config key update={other}: expected implicit or explicit"
                )))
            }
        },
    };
    Ok(kind)
}

fn update_label(u: UpdateKind) -> &'static str {
    match u {
        UpdateKind::Implicit => "implicit",
        UpdateKind::Explicit => "explicit",
    }
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| SgdiagError::InvalidConfig(format!("missing required {flag}")))
}

fn parse_label_rule(s: &str) -> Result<LabelRule> {
    let t = s.trim().to_ascii_lowercase();
    if let Some(k) = t.strip_suffix("-vs-rest") {
        let c: i64 = k.parse().map_err(|_| {
            SgdiagError::InvalidConfig(format!("bad class in label rule '{s}'"))
        })?;
        return Ok(LabelRule::ClassVsRest(c));
    }
    if let Some(k) = t.strip_prefix("le:") {
        let c: i64 = k.parse().map_err(|_| {
            SgdiagError::InvalidConfig(format!("bad threshold in label rule '{s}'"))
        })?;
        return Ok(LabelRule::LessEqual(c));
    }
    match t.as_str() {
        "raw" => Ok(LabelRule::Raw),
        "binary01" | "01" => Ok(LabelRule::Binary01),
        "plus-minus" | "plusminus" | "pm" => Ok(LabelRule::PlusMinus),
        _ => Err(SgdiagError::InvalidConfig(format!(
            "unknown label rule '{s}' (raw, binary01, plus-minus, K-vs-rest, le:K)"
        ))),
    }
}

fn label_rule_name(rule: &LabelRule) -> String {
    match rule {
        LabelRule::Raw => "raw".into(),
        LabelRule::Binary01 => "binary01".into(),
        LabelRule::PlusMinus => "plus-minus".into(),
        LabelRule::ClassVsRest(c) => format!("{c}-vs-rest"),
        LabelRule::LessEqual(c) => format!("le:{c}"),
    }
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse().map_err(|_| {
                SgdiagError::InvalidConfig(format!("bad number '{t}' in {what}"))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    if vals.is_empty() {
        return Err(SgdiagError::InvalidConfig(format!("empty {what}")));
    }
    Ok(vals)
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let m = match tok.to_ascii_lowercase().replace('_', "-").as_str() {
            "isgd-half" | "half" => Method::IsgdHalf,
            "svrg" => Method::Svrg,
            "classical-isgd" | "classical" => Method::ClassicalIsgd,
            "averaged-isgd" | "averaged" => Method::AveragedIsgd,
            _ => {
                return Err(SgdiagError::InvalidConfig(format!(
                    "unknown method '{tok}' (isgd-half, svrg, classical-isgd, averaged-isgd)"
                )))
            }
        };
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(SgdiagError::InvalidConfig("empty method list".into()));
    }
    Ok(out)
}

/// Parse "p=20,n=5000,sigma=3" into a simulation spec. The normal model
/// defaults to sigma=3 when neither sigma nor snr is given.
fn parse_simulate(s: &str, model: SimModelKind, seed: u64) -> Result<SimSpec> {
    let mut p = 20usize;
    let mut n = 5000usize;
    let mut sigma: Option<f64> = None;
    let mut snr: Option<f64> = None;
    let mut sigma0 = 2.0f64;
    for part in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| {
            SgdiagError::InvalidConfig(format!("expected key=value in simulate spec, got '{part}'"))
        })?;
        let bad = |what: &str| SgdiagError::InvalidConfig(format!("bad {what} '{v}' in simulate spec"));
        match k.trim().to_ascii_lowercase().as_str() {
            "p" => p = v.trim().parse().map_err(|_| bad("p"))?,
            "n" => n = v.trim().parse().map_err(|_| bad("n"))?,
            "sigma" => sigma = Some(v.trim().parse().map_err(|_| bad("sigma"))?),
            "snr" => snr = Some(v.trim().parse().map_err(|_| bad("snr"))?),
            "sigma0" => sigma0 = v.trim().parse().map_err(|_| bad("sigma0"))?,
            other => {
                return Err(SgdiagError::InvalidConfig(format!(
                    "unknown simulate key '{other}' (p, n, sigma, snr, sigma0)"
                )))
            }
        }
    }
    if model == SimModelKind::Normal && sigma.is_none() && snr.is_none() {
        sigma = Some(3.0);
    }
    Ok(SimSpec {
        p,
        n,
        model,
        sigma,
        snr,
        theta_star: None,
        sigma0,
        seed,
    })
}

fn model_kind(arg: Option<ModelArg>) -> SimModelKind {
    match arg {
        Some(ModelArg::Logistic) => SimModelKind::Logistic,
        _ => SimModelKind::Normal,
    }
}

// --- problem assembly ------------------------------------------------------

struct Problem {
    model: LossModel,
    points: Vec<DataPoint>,
    truth: Option<Vec<f64>>,
    theta0: Vec<f64>,
    source: serde_json::Value,
}

fn build_problem(
    src: &SourceArgs,
    model: Option<ModelArg>,
    seed: u64,
    file: &FileConfig,
) -> Result<Problem> {
    let data_path = match &src.data {
        Some(p) => Some(p.clone()),
        None if src.simulate.is_none() => file.get::<PathBuf>("data")?,
        None => None,
    };
    if let Some(path) = data_path {
        let format = match src.format {
            Some(FormatArg::Libsvm) => FileFormat::Libsvm,
            Some(FormatArg::Csv) => FileFormat::Csv,
            None => match file.0.get("format").map(String::as_str) {
                Some("libsvm") => FileFormat::Libsvm,
                Some("csv") => FileFormat::Csv,
                Some(other) => {
                    return Err(SgdiagError::InvalidConfig(format!(
                        "config key format={other}: expected libsvm or csv"
                    )))
                }
                None => return Err(SgdiagError::InvalidConfig("missing required --format".into())),
            },
        };
        let rule_str = resolve_opt(src.label_rule.clone(), file, "label_rule")?;
        let (rule, kind) = match (rule_str, model) {
            (Some(r), m) => {
                let rule = parse_label_rule(&r)?;
                let kind = match m {
                    Some(k) => model_kind(Some(k)),
                    None if rule == LabelRule::Raw => SimModelKind::Normal,
                    None => SimModelKind::Logistic,
                };
                (rule, kind)
            }
            (None, Some(ModelArg::Normal)) => (LabelRule::Raw, SimModelKind::Normal),
            (None, _) => (LabelRule::Binary01, SimModelKind::Logistic),
        };
        let label_column = resolve_opt(src.label_column.clone(), file, "label_column")?;
        let ds = load_benchmark(&path, format, &rule, 0.0, seed, label_column.as_deref())?;
        let model = match kind {
            SimModelKind::Normal => LossModel::Quadratic,
            SimModelKind::Logistic => LossModel::Logistic,
        };
        let theta0 = vec![0.0; ds.dim];
        let source = json!({
            "data": path.display().to_string(),
            "format": if format == FileFormat::Libsvm { "libsvm" } else { "csv" },
            "label_rule": label_rule_name(&rule),
            "label_column": label_column,
        });
        Ok(Problem {
            model,
            points: ds.train,
            truth: None,
            theta0,
            source,
        })
    } else {
        let spec_str = match &src.simulate {
            Some(s) => s.clone(),
            None => file.get::<String>("simulate")?.unwrap_or_default(),
        };
        let spec = parse_simulate(&spec_str, model_kind(model), seed)?;
        let (points, truth) = simulate_dataset(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1);
        let theta0 = draw_theta0(&spec, &truth.theta_star, &mut rng);
        let source = json!({ "simulate": serde_json::to_value(&spec).expect("spec serializes") });
        Ok(Problem {
            model: spec.loss_model(),
            points,
            truth: Some(truth.theta_star),
            theta0,
            source,
        })
    }
}

// --- output helpers --------------------------------------------------------

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn trace_rows(trace: &RunTrace) -> Vec<Vec<String>> {
    trace
        .records
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                fmt_f(r.gamma),
                fmt_opt(r.s),
                fmt_opt(r.error_sq),
            ]
        })
        .collect()
}

fn curve_rows(curves: &[MethodCurve]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for curve in curves {
        let tuned = curve.tuned.map(fmt_f).unwrap_or_default();
        for p in &curve.points {
            rows.push(vec![
                curve.method.label().to_string(),
                tuned.clone(),
                fmt_f(p.passes),
                fmt_f(p.error),
            ]);
        }
    }
    rows
}

fn print_curve_summary(curves: &[MethodCurve]) {
    for curve in curves {
        let last = curve
            .points
            .last()
            .map(|p| fmt_f(p.error))
            .unwrap_or_else(|| "-".into());
        let tuned = curve
            .tuned
            .map(|t| format!("tuned={t}"))
            .unwrap_or_else(|| "fixed defaults".into());
        let mark = if curve.diverged { "  [diverged]" } else { "" };
        println!("  {:<16} {:<16} final error {}{}", curve.method.label(), tuned, last, mark);
    }
}

// --- subcommands -----------------------------------------------------------

struct Global {
    file: FileConfig,
    out_dir: PathBuf,
}

fn cmd_diagnose(g: &Global, a: DiagnoseArgs) -> Result<i32> {
    let file = &g.file;
    let seed = resolve(a.seed, file, "seed", 1)?;
    let prob = build_problem(&a.source, a.model, seed, file)?;
    let n = prob.points.len() as u64;
    let gamma = resolve(a.gamma, file, "gamma", 0.02)?;
    let burnin = resolve_opt(a.burnin, file, "burnin")?
        .unwrap_or_else(|| ((n as f64) * 0.1).ceil() as u64);
    let maxit = resolve_opt(a.max_iterations, file, "max_iterations")?.unwrap_or(10 * n);
    let stride = resolve(a.trace_stride, file, "trace_stride", 10)?;
    let update = resolve_update(a.update, file)?;
    let cfg = SgdConfig {
        gamma0: gamma,
        schedule: Schedule::Constant,
        update,
        seed,
        max_iterations: maxit,
        divergence_threshold: 1e12,
        trace_stride: stride,
    };
    let mut manifest = RunManifest::new(
        "diagnose",
        json!({
            "gamma": gamma, "burnin": burnin, "max_iterations": maxit,
            "trace_stride": stride, "update": update_label(update),
            "source": prob.source,
        }),
        seed,
    );
    let mut stream = ResampledStream::new(prob.points.clone(), seed.wrapping_add(500_000))?;
    let mut monitor = DiagnosticMonitor::new(burnin);
    let trace = run_chain(
        &prob.model,
        &mut stream,
        &cfg,
        prob.theta0.clone(),
        prob.truth.as_deref(),
        Some(&mut monitor),
    )?;
    write_csv(
        &g.out_dir.join("diagnose_trace.csv"),
        &["n", "gamma", "statistic", "error_sq"],
        &trace_rows(&trace),
    )?;
    manifest.record_output("diagnose_trace.csv");
    manifest.finish(&g.out_dir)?;

    let activation = monitor.diag.check_activation();
    if trace.diverged {
        println!(
            "chain diverged after {} iterations (gamma={})",
            trace.iterations, gamma
        );
        return Ok(4);
    }
    match activation {
        Some(at) => {
            println!(
                "detector activated at iteration {at} (statistic {})",
                fmt_f(monitor.diag.s)
            );
            Ok(0)
        }
        None => {
            println!(
                "no activation within {} iterations (statistic {})",
                trace.iterations,
                fmt_f(monitor.diag.s)
            );
            Ok(3)
        }
    }
}

fn cmd_sgd_half(g: &Global, a: SgdHalfArgs) -> Result<i32> {
    let file = &g.file;
    let seed = resolve(a.seed, file, "seed", 1)?;
    let prob = build_problem(&a.source, a.model, seed, file)?;
    let maxit = require(resolve_opt(a.maxit, file, "maxit")?, "--maxit")?;
    let gamma0 = resolve(a.gamma0, file, "gamma0", 0.5)?;
    let gamma_floor = resolve(a.gamma_floor, file, "gamma_floor", 1e-8)?;
    let halving_factor = resolve(a.halving_factor, file, "halving_factor", 0.5)?;
    let burnin = resolve_opt(a.burnin, file, "burnin")?
        .unwrap_or_else(|| (((maxit as f64) * 0.1).ceil() as u64).max(1));
    let max_steps = resolve_opt(a.max_steps, file, "max_steps")?;
    let stride = resolve(a.trace_stride, file, "trace_stride", 10)?;
    let update = resolve_update(a.update, file)?;
    let hcfg = HalvingConfig {
        gamma0,
        burnin,
        maxit,
        gamma_floor,
        update,
        halving_factor,
        divergence_threshold: 1e12,
        max_steps,
        trace_stride: stride,
    };
    let mut manifest = RunManifest::new(
        "sgd-half",
        json!({
            "gamma0": gamma0, "maxit": maxit, "gamma_floor": gamma_floor,
            "halving_factor": halving_factor, "burnin": burnin,
            "max_steps": max_steps, "trace_stride": stride,
            "update": update_label(update), "source": prob.source,
        }),
        seed,
    );
    let mut stream = ResampledStream::new(prob.points.clone(), seed.wrapping_add(500_000))?;
    let (theta, ht) = run_sgd_half(
        &prob.model,
        &mut stream,
        &hcfg,
        &prob.theta0,
        prob.truth.as_deref(),
        None,
    )?;
    write_csv(
        &g.out_dir.join("halving_trace.csv"),
        &["n", "gamma", "statistic", "error_sq"],
        &trace_rows(&ht.trace),
    )?;
    manifest.record_output("halving_trace.csv");
    let final_json = json!({
        "theta": theta,
        "final_gamma": ht.final_gamma,
        "iterations": ht.trace.iterations,
        "detections": ht.detections,
        "cap_hit": ht.cap_hit,
        "diverged": ht.diverged,
    });
    let mut bytes = serde_json::to_vec_pretty(&final_json).expect("result serializes");
    bytes.push(b'\n');
    atomic_write(&g.out_dir.join("final_theta.json"), &bytes)?;
    manifest.record_output("final_theta.json");
    manifest.finish(&g.out_dir)?;

    println!(
        "{} detections over {} iterations, final rate {}{}",
        ht.detections.len(),
        ht.trace.iterations,
        fmt_f(ht.final_gamma),
        if ht.cap_hit { " (step cap hit)" } else { "" }
    );
    if ht.diverged {
        println!("chain diverged; see halving_trace.csv");
        return Ok(4);
    }
    Ok(0)
}

fn parse_grid(s: &str) -> Result<GridSpec> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 7 {
        return Err(SgdiagError::InvalidConfig(format!(
            "grid spec needs 7 fields axis1,axis2,min1,max1,min2,max2,res, got {}",
            parts.len()
        )));
    }
    let bad = |what: &str, v: &str| {
        SgdiagError::InvalidConfig(format!("bad {what} '{v}' in grid spec"))
    };
    Ok(GridSpec {
        axis1: parts[0].parse().map_err(|_| bad("axis", parts[0]))?,
        axis2: parts[1].parse().map_err(|_| bad("axis", parts[1]))?,
        min1: parts[2].parse().map_err(|_| bad("bound", parts[2]))?,
        max1: parts[3].parse().map_err(|_| bad("bound", parts[3]))?,
        min2: parts[4].parse().map_err(|_| bad("bound", parts[4]))?,
        max2: parts[5].parse().map_err(|_| bad("bound", parts[5]))?,
        res: parts[6].parse().map_err(|_| bad("resolution", parts[6]))?,
    })
}

fn cmd_region(g: &Global, a: RegionArgs) -> Result<i32> {
    let file = &g.file;
    if a.source.data.is_some() {
        return Err(SgdiagError::InvalidConfig(
            "the region command needs a simulated problem with known truth; use --simulate".into(),
        ));
    }
    let seed = resolve(a.seed, file, "seed", 1)?;
    let grid = parse_grid(&require(
        resolve_opt(a.grid.clone(), file, "grid")?,
        "--grid",
    )?)?;
    let reps = resolve(a.reps, file, "reps", 200)?;
    let gamma = resolve(a.gamma, file, "gamma", 0.02)?;
    let chains = resolve(a.chains, file, "chains", 8)?;
    let steps = resolve(a.steps, file, "steps", 2000)?;
    let burn_frac = resolve(a.burn_frac, file, "burn_frac", 0.5)?;
    let coverage = resolve(a.coverage, file, "coverage", 0.9)?;
    let update = resolve_update(a.update, file)?;

    let spec_str = match &a.source.simulate {
        Some(s) => s.clone(),
        None => file.get::<String>("simulate")?.unwrap_or_default(),
    };
    let spec = parse_simulate(&spec_str, model_kind(a.model), seed)?;
    spec.validate()?;
    let theta_star = spec.resolved_theta_star()?;
    let model = spec.loss_model();
    let generator: Box<dyn PointGenerator> = match spec.model {
        SimModelKind::Normal => Box::new(GaussianLinearGen::new(
            theta_star.clone(),
            spec.resolved_sigma()?,
        )),
        SimModelKind::Logistic => Box::new(LogisticGen::new(theta_star.clone())),
    };
    let mut manifest = RunManifest::new(
        "region",
        json!({
            "grid": serde_json::to_value(&grid).expect("grid serializes"),
            "reps": reps, "gamma": gamma, "chains": chains,
            "steps": steps, "burn_frac": burn_frac, "coverage": coverage,
            "update": update_label(update),
            "simulate": serde_json::to_value(&spec).expect("spec serializes"),
        }),
        seed,
    );

    let mut map = map_drift_region(
        &model,
        generator.as_ref(),
        &theta_star,
        &grid,
        gamma,
        update,
        reps,
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let theta0 = draw_theta0(&spec, &theta_star, &mut rng);
    let empirical_seed = seed ^ 0xE3B0_C442_98FC_1C14;
    let axes = (grid.axis1, grid.axis2);
    let pool = pooled_iterate_projections(
        &model,
        generator.as_ref(),
        &theta0,
        gamma,
        update,
        chains,
        steps,
        burn_frac,
        empirical_seed,
        axes,
    )?;
    map.overlay_occupancy(&pool);
    let summary = empirical_convergence_region(
        &model,
        generator.as_ref(),
        &theta0,
        gamma,
        update,
        chains,
        steps,
        burn_frac,
        coverage,
        empirical_seed,
        axes,
    )?;

    let class_name = |c: &CellClass| match c {
        CellClass::Negative => "negative",
        CellClass::Positive => "positive",
        CellClass::Indeterminate => "indeterminate",
    };
    let rows: Vec<Vec<String>> = map
        .cells
        .iter()
        .map(|c| {
            vec![
                fmt_f(c.c1),
                fmt_f(c.c2),
                fmt_f(c.estimate.mean_delta),
                fmt_f(c.estimate.std_err),
                class_name(&c.class).to_string(),
                c.occupancy.to_string(),
            ]
        })
        .collect();
    write_csv(
        &g.out_dir.join("region_map.csv"),
        &["coord1", "coord2", "mean_delta", "std_err", "class", "occupancy"],
        &rows,
    )?;
    manifest.record_output("region_map.csv");

    let mut emp_rows = vec![
        vec!["box_lo".to_string(), fmt_f(summary.box_lo[0]), fmt_f(summary.box_lo[1])],
        vec!["box_hi".to_string(), fmt_f(summary.box_hi[0]), fmt_f(summary.box_hi[1])],
    ];
    for &(x, y) in &summary.hull {
        emp_rows.push(vec!["hull".to_string(), fmt_f(x), fmt_f(y)]);
    }
    write_csv(
        &g.out_dir.join("region_empirical.csv"),
        &["kind", "c1", "c2"],
        &emp_rows,
    )?;
    manifest.record_output("region_empirical.csv");

    let mut bytes = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    bytes.push(b'\n');
    atomic_write(&g.out_dir.join("region_summary.json"), &bytes)?;
    manifest.record_output("region_summary.json");
    manifest.finish(&g.out_dir)?;

    let count = |want: CellClass| map.cells.iter().filter(|c| c.class == want).count();
    println!(
        "grid {}x{}: {} negative / {} positive / {} indeterminate cells",
        grid.res,
        grid.res,
        count(CellClass::Negative),
        count(CellClass::Positive),
        count(CellClass::Indeterminate),
    );
    println!(
        "empirical region: box [{}, {}] x [{}, {}], radius {}",
        fmt_f(summary.box_lo[0]),
        fmt_f(summary.box_hi[0]),
        fmt_f(summary.box_lo[1]),
        fmt_f(summary.box_hi[1]),
        fmt_f(summary.radius),
    );
    Ok(0)
}

fn cmd_table1(g: &Global, a: Table1Args) -> Result<i32> {
    let file = &g.file;
    let seed = resolve(a.seed, file, "seed", 0)?;
    let gammas_str = resolve(
        a.gammas.clone(),
        file,
        "gammas",
        "0.0005,0.001,0.002,0.004,0.008,0.016,0.032,0.064".to_string(),
    )?;
    let gammas = parse_f64_list(&gammas_str, "--gammas")?;
    let runs = resolve(a.runs, file, "runs", 100)?;
    let p = resolve(a.p, file, "p", 20)?;
    let n = resolve(a.n, file, "n", 5000)?;
    let mut sigma = resolve_opt(a.sigma, file, "sigma")?;
    let snr = resolve_opt(a.snr, file, "snr")?;
    let sigma0 = resolve(a.sigma0, file, "sigma0", 2.0)?;
    let kind = model_kind(a.model);
    if kind == SimModelKind::Normal && sigma.is_none() && snr.is_none() {
        sigma = Some(3.0);
    }
    let burnin_frac = resolve(a.burnin_frac, file, "burnin_frac", 0.1)?;
    let horizon_passes = resolve(a.horizon_passes, file, "horizon_passes", 4)?;
    let update = resolve_update(a.update, file)?;
    let spec = SimSpec {
        p,
        n,
        model: kind,
        sigma,
        snr,
        theta_star: None,
        sigma0,
        seed,
    };
    let proto = EvalProtocol {
        runs,
        burnin_frac,
        horizon_passes,
        update,
        seed,
    };
    let mut manifest = RunManifest::new(
        "table1",
        json!({
            "gammas": gammas, "runs": runs, "burnin_frac": burnin_frac,
            "horizon_passes": horizon_passes, "update": update_label(update),
            "simulate": serde_json::to_value(&spec).expect("spec serializes"),
        }),
        seed,
    );

    let evals = evaluate_diagnostic(&gammas, &spec, &proto)?;

    let mut record_rows = Vec::new();
    for ev in &evals {
        for r in &ev.records {
            record_rows.push(vec![
                fmt_f(r.gamma),
                r.run.to_string(),
                r.tau.to_string(),
                fmt_f(r.e0),
                fmt_f(r.e_half_tau),
                fmt_f(r.e_two_tau),
                r.extended.to_string(),
            ]);
        }
    }
    write_csv(
        &g.out_dir.join("diag_eval_records.csv"),
        &["gamma", "run", "tau", "e0", "e_half_tau", "e_two_tau", "extended"],
        &record_rows,
    )?;
    manifest.record_output("diag_eval_records.csv");

    let terms = ["intercept", "e0", "tau"];
    let mut fit_rows = Vec::new();
    for ev in &evals {
        for (name, fit) in [("mid", &ev.fit_mid), ("end", &ev.fit_end)] {
            for (i, term) in terms.iter().enumerate() {
                fit_rows.push(vec![
                    fmt_f(ev.gamma),
                    name.to_string(),
                    term.to_string(),
                    fmt_f(fit.coefficients[i]),
                    fmt_f(fit.standard_errors[i]),
                    fmt_f(fit.t_values[i]),
                    fmt_f(fit.p_values[i]),
                ]);
            }
        }
    }
    write_csv(
        &g.out_dir.join("diag_eval_fits.csv"),
        &["gamma", "fit", "term", "coefficient", "std_error", "t_value", "p_value"],
        &fit_rows,
    )?;
    manifest.record_output("diag_eval_fits.csv");
    manifest.finish(&g.out_dir)?;

    println!(
        "{:<10} {:>6}  {:>14} {:>12} {:<3}  {:>14} {:>12} {:<3}",
        "rate", "failed", "mid e0 coef", "p", "", "end e0 coef", "p", ""
    );
    for ev in &evals {
        let pm = ev.fit_mid.p_values[1];
        let pe = ev.fit_end.p_values[1];
        println!(
            "{:<10} {:>6}  {:>14.6} {:>12.3e} {:<3}  {:>14.6} {:>12.3e} {:<3}",
            fmt_f(ev.gamma),
            ev.n_failed,
            ev.fit_mid.coefficients[1],
            pm,
            significance_stars(pm),
            ev.fit_end.coefficients[1],
            pe,
            significance_stars(pe),
        );
    }
    println!("significance: '***' p<0.001, '**' p<0.01, '*' p<0.05, '.' p<0.1");
    println!(
        "columns: coefficient on the starting error in the regression of the error at tau/2 (mid) and 2*tau (end) on [1, E0, tau]"
    );
    Ok(0)
}

struct CompareResolved {
    methods: Vec<Method>,
    ccfg: CompareConfig,
}

#[allow(clippy::too_many_arguments)]
fn resolve_compare(
    file: &FileConfig,
    seed: u64,
    budget: usize,
    methods: Option<String>,
    tuning_grid: Option<String>,
    gamma0: Option<f64>,
    halving_burnin: Option<u64>,
    halving_factor: Option<f64>,
    evals_per_pass: Option<usize>,
) -> Result<CompareResolved> {
    let methods_str = resolve(
        methods,
        file,
        "methods",
        "isgd-half,svrg,classical-isgd,averaged-isgd".to_string(),
    )?;
    let methods = parse_methods(&methods_str)?;
    let grid = match resolve_opt(tuning_grid, file, "tuning_grid")? {
        Some(s) => parse_f64_list(&s, "--tuning-grid")?,
        None => default_tuning_grid(),
    };
    let ccfg = CompareConfig {
        budget_passes: budget,
        seed,
        tuning_grid: grid,
        halving_gamma0: resolve(gamma0, file, "gamma0", 0.256)?,
        halving_burnin: resolve_opt(halving_burnin, file, "halving_burnin")?,
        halving_factor: resolve(halving_factor, file, "halving_factor", 0.5)?,
        evals_per_pass: resolve(evals_per_pass, file, "evals_per_pass", 2)?,
    };
    Ok(CompareResolved { methods, ccfg })
}

fn cmd_compare(g: &Global, a: CompareArgs) -> Result<i32> {
    let file = &g.file;
    let seed = resolve(a.seed, file, "seed", 0)?;
    let budget = resolve(a.budget, file, "budget", 10)?;
    let p = resolve(a.p, file, "p", 20)?;
    let n = resolve(a.n, file, "n", 5000)?;
    let mut sigma = resolve_opt(a.sigma, file, "sigma")?;
    let snr = resolve_opt(a.snr, file, "snr")?;
    let kind = model_kind(a.model);
    if kind == SimModelKind::Normal && sigma.is_none() && snr.is_none() {
        sigma = Some(3.0);
    }
    let spec = SimSpec {
        p,
        n,
        model: kind,
        sigma,
        snr,
        theta_star: None,
        sigma0: 2.0,
        seed,
    };
    let r = resolve_compare(
        file,
        seed,
        budget,
        a.methods.clone(),
        a.tuning_grid.clone(),
        a.gamma0,
        a.halving_burnin,
        a.halving_factor,
        a.evals_per_pass,
    )?;
    let mut manifest = RunManifest::new(
        "compare",
        json!({
            "methods": r.methods.iter().map(|m| m.label()).collect::<Vec<_>>(),
            "config": serde_json::to_value(&r.ccfg).expect("config serializes"),
            "simulate": serde_json::to_value(&spec).expect("spec serializes"),
        }),
        seed,
    );

    let (train, truth) = simulate_dataset(&spec)?;
    let metric = EvalMetric::ParamError(&truth.theta_star);
    let curves = compare_methods(&spec.loss_model(), &train, &metric, &r.methods, &r.ccfg)?;
    write_csv(
        &g.out_dir.join("compare_curves.csv"),
        &["method", "tuned", "passes", "error"],
        &curve_rows(&curves),
    )?;
    manifest.record_output("compare_curves.csv");
    manifest.finish(&g.out_dir)?;

    println!(
        "parameter error over {} passes, n={}, p={} ({} model):",
        budget,
        n,
        p,
        if kind == SimModelKind::Normal { "normal" } else { "logistic" }
    );
    print_curve_summary(&curves);
    Ok(0)
}

fn cmd_benchmark(g: &Global, a: BenchmarkArgs) -> Result<i32> {
    let file = &g.file;
    let seed = resolve(a.seed, file, "seed", 0)?;
    let passes = resolve(a.passes, file, "passes", 10)?;
    let test_fraction = resolve(a.test_fraction, file, "test_fraction", 0.2)?;
    let rule_str = resolve(a.label_rule.clone(), file, "label_rule", "binary01".to_string())?;
    let rule = parse_label_rule(&rule_str)?;
    let label_column = resolve_opt(a.label_column.clone(), file, "label_column")?;
    let format = match a.format {
        FormatArg::Libsvm => FileFormat::Libsvm,
        FormatArg::Csv => FileFormat::Csv,
    };
    let subsample_cap = resolve_opt(a.subsample, file, "subsample")?;
    let r = resolve_compare(
        file,
        seed,
        passes,
        a.methods.clone(),
        a.tuning_grid.clone(),
        a.gamma0,
        a.halving_burnin,
        a.halving_factor,
        a.evals_per_pass,
    )?;
    let mut manifest = RunManifest::new(
        "benchmark",
        json!({
            "data": a.data.display().to_string(),
            "format": if format == FileFormat::Libsvm { "libsvm" } else { "csv" },
            "label_rule": label_rule_name(&rule),
            "label_column": label_column,
            "subsample": subsample_cap,
            "passes": passes,
            "test_fraction": test_fraction,
            "methods": r.methods.iter().map(|m| m.label()).collect::<Vec<_>>(),
            "config": serde_json::to_value(&r.ccfg).expect("config serializes"),
        }),
        seed,
    );

    let ds = load_benchmark(
        &a.data,
        format,
        &rule,
        test_fraction,
        seed,
        label_column.as_deref(),
    )?;
    let train = match subsample_cap {
        Some(k) => subsample(&ds.train, k, seed ^ 0x5DEE_CE66_ED5B_A11D),
        None => ds.train,
    };
    let model = if rule == LabelRule::Raw {
        LossModel::Quadratic
    } else {
        LossModel::Logistic
    };
    let metric = EvalMetric::Holdout(&ds.test);
    let curves = compare_methods(&model, &train, &metric, &r.methods, &r.ccfg)?;
    write_csv(
        &g.out_dir.join("benchmark_curves.csv"),
        &["method", "tuned", "passes", "error"],
        &curve_rows(&curves),
    )?;
    manifest.record_output("benchmark_curves.csv");
    manifest.finish(&g.out_dir)?;

    println!(
        "holdout error over {} passes ({} train / {} test rows, {} features):",
        passes,
        train.len(),
        ds.test.len(),
        ds.dim
    );
    print_curve_summary(&curves);
    Ok(0)
}

// --- entry -----------------------------------------------------------------

fn exit_code(e: &SgdiagError) -> i32 {
    match e {
        SgdiagError::InvalidConfig(_)
        | SgdiagError::Parse { .. }
        | SgdiagError::Empty(_)
        | SgdiagError::DimensionMismatch { .. }
        | SgdiagError::RankDeficient { .. } => 2,
        SgdiagError::NonFinite { .. } => 4,
        SgdiagError::Io(_) => 1,
    }
}

fn run(cli: Cli) -> Result<i32> {
    if let Some(w) = cli.workers {
        if w > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build_global()
                .ok();
        }
    }
    let file = FileConfig::load(cli.config.as_deref())?;
    let out_dir = cli
        .out_dir
        .unwrap_or_else(|| PathBuf::from("sgdiag_out"));
    let g = Global { file, out_dir };
    match cli.command {
        Cmd::Diagnose(a) => cmd_diagnose(&g, a),
        Cmd::SgdHalf(a) => cmd_sgd_half(&g, a),
        Cmd::Region(a) => cmd_region(&g, a),
        Cmd::Table1(a) => cmd_table1(&g, a),
        Cmd::Compare(a) => cmd_compare(&g, a),
        Cmd::Benchmark(a) => cmd_benchmark(&g, a),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

//! Command-line driver. Every flag overrides the matching key of the
//! configuration file, and the effective configuration is written next to
//! the outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{
    aggregate, fit_single, node_emit, read_reports_csv, repeat_data, run_experiment, write_reports_csv, DataSource,
    EmitOptions, ExperimentConfig, ExperimentOutcome, FitResult, Method,
};
use crate::metrics::{summarize_reports, EvalReport, MeanCi, SummaryRow};
use crate::model::{compute_bounds, partition, random_scale_matrix, simulate_data, Dataset, Normalization, Priors};
use crate::privacy::PrivacyBudget;
use crate::samplers::{run_mcmc_normalx, McmcConfig};
use crate::baselines::{run_mcmc_bs, ExtendedNoisyStats};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "DP_LINREG_OUT";

#[derive(Debug, Parser)]
#[command(name = "dp-linreg", version, about = "Differentially private distributed Bayesian linear regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and save it as CSV.
    Simulate(ExperimentArgs),
    /// Fit one method on one dataset and print the result as JSON.
    Fit(FitArgs),
    /// Run a full experiment grid.
    Grid(ExperimentArgs),
    /// Posterior-calibration study: MMD² against the non-private posterior.
    Mmd(ExperimentArgs),
    /// Per-iteration timing of MCMC samplers against the dimension.
    Bench(BenchArgs),
    /// Aggregate report CSVs into summary tables.
    Report(ReportArgs),
}

/// Flags shared by the experiment commands; each maps to a config key.
#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// TOML or JSON experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `sim` or a CSV path.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Node counts J, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub nodes: Option<Vec<usize>>,
    /// Privacy levels ε, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Draw fresh data for every repeat instead of only fresh noise.
    #[arg(long)]
    pub resample_data: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to the config value, then `$DP_LINREG_OUT`, then `results`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_normalization)]
    pub normalization: Option<Normalization>,
    #[arg(long)]
    pub mmd: Option<bool>,
    #[arg(long)]
    pub mmd_samples: Option<usize>,
    /// Release exact statistics (test mode).
    #[arg(long)]
    pub noiseless: Option<bool>,
    #[arg(long)]
    pub sigma_y2_tilde: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub method: Method,
    #[command(flatten)]
    pub common: ExperimentArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Directory of report CSVs.
    pub dir: PathBuf,
}

fn parse_normalization(s: &str) -> std::result::Result<Normalization, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown normalization `{s}`"))
}

impl ExperimentArgs {
    /// Applies the flags on top of `base`.
    pub fn apply(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => base,
        };
        if let Some(v) = &self.data {
            c.data = v.parse()?;
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$field = v.clone(); })*
            };
        }
        set!(n => n, d => d, test_fraction => test_fraction, nodes => nodes, eps => epsilons, methods => methods,
             iterations => iterations, repeats => repeats, resample_data => resample_data, seed => seed, normalization => normalization, mmd => mmd,
             mmd_samples => mmd_samples, noiseless => noiseless);
        if self.delta.is_some() {
            c.delta = self.delta;
        }
        if self.burn_in.is_some() {
            c.burn_in = self.burn_in;
        }
        if self.out_dir.is_some() {
            c.output_dir = self.out_dir.clone();
        }
        if self.sigma_y2_tilde.is_some() {
            c.sigma_y2_tilde = self.sigma_y2_tilde;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Flag, then config, then environment, then `results`.
pub fn resolve_output_dir(configured: Option<&Path>) -> PathBuf {
    configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::from)
}

fn echo_config(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &config.to_toml_string()?)
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match run(cli.command, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            let code = e.exit_code();
            let body = serde_json::json!({ "error": e.to_string(), "exit_code": code });
            eprintln!("{body}");
            code
        }
    }
}

/// Runs one command, writing human-facing output to `out`.
pub fn run<W: Write>(command: Command, out: &mut W) -> Result<i32> {
    match command {
        Command::Simulate(args) => simulate(&args, out),
        Command::Fit(args) => fit(&args, out),
        Command::Grid(args) => grid(&args.apply(ExperimentConfig::default())?, out),
        Command::Mmd(args) => grid(&args.apply(mmd_defaults())?, out),
        Command::Bench(args) => bench(&args, out),
        Command::Report(args) => report(&args.dir, out),
    }
}

fn simulate<W: Write>(args: &ExperimentArgs, out: &mut W) -> Result<i32> {
    let config = args.apply(ExperimentConfig::default())?;
    if config.data != DataSource::Simulate {
        return Err(Error::Config("simulate needs `data = \"simulate\"`".into()));
    }
    let dir = resolve_output_dir(config.output_dir.as_deref());
    prepare_dir(&dir)?;
    let data = repeat_data(&config, 0)?;
    write_dataset(&dir.join("train.csv"), &data.train)?;
    write_dataset(&dir.join("test.csv"), &data.test)?;
    let truth = data.truth.as_ref().expect("simulated data carry their truth");
    let truth_json = serde_json::json!({
        "theta": truth.theta.as_slice(),
        "sigma_y2": truth.sigma_y2,
        "sigma_x": truth.sigma_x.as_matrix().row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    write_text(&dir.join("truth.json"), &serde_json::to_string_pretty(&truth_json)?)?;
    echo_config(&dir, &config)?;
    writeln!(out, "wrote {} training and {} test rows to {}", data.train.n_rows(), data.test.n_rows(), dir.display())?;
    Ok(0)
}

/// Writes `x1,…,xd,y` with a header row.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=data.dim()).map(|k| format!("x{k}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (row, y) in data.x().row_iter().zip(data.y().iter()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic JSON result of `fit`; timings are deliberately left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub method: String,
    pub dataset: String,
    pub nodes: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub seed: u64,
    pub theta_hat: Vec<f64>,
    pub theta_cov: Option<Vec<Vec<f64>>>,
    pub sigma_y2_mean: Option<f64>,
    pub s_acceptance: Option<f64>,
    pub sigma_y2_acceptance: Option<f64>,
    pub theta_true: Option<Vec<f64>>,
    pub mse_estimation: Option<f64>,
    pub mse_prediction: f64,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn fit<W: Write>(args: &FitArgs, out: &mut W) -> Result<i32> {
    let base = ExperimentConfig { nodes: vec![1], epsilons: vec![1.0], repeats: 1, ..ExperimentConfig::default() };
    let config = args.common.apply(base)?;
    let (result, report, data) = fit_single(&config, args.method)?;
    let (theta_cov, sigma_y2_mean, s_acc, sy_acc) = match &result {
        FitResult::Gaussian(p) => (Some(rows(p.cov.as_matrix())), None, None, None),
        FitResult::Trace(t) => (Some(rows(&t.posterior_cov())), Some(t.sigma_y2_mean()), t.s_acceptance, t.sigma_y2_acceptance),
        FitResult::Point(_) => (None, None, None, None),
    };
    let output = FitOutput {
        method: report.method,
        dataset: report.dataset,
        nodes: report.nodes,
        epsilon: report.epsilon,
        delta: report.delta,
        seed: config.seed,
        theta_hat: result.theta_hat().iter().copied().collect(),
        theta_cov,
        sigma_y2_mean,
        s_acceptance: s_acc,
        sigma_y2_acceptance: sy_acc,
        theta_true: data.truth.as_ref().map(|t| t.theta.iter().copied().collect()),
        mse_estimation: report.mse_estimation,
        mse_prediction: report.mse_prediction,
    };
    let json = serde_json::to_string_pretty(&output)?;
    writeln!(out, "{json}")?;
    if config.output_dir.is_some() || std::env::var_os(OUTPUT_DIR_ENV).is_some() {
        let dir = resolve_output_dir(config.output_dir.as_deref());
        prepare_dir(&dir)?;
        write_text(&dir.join("fit.json"), &json)?;
        echo_config(&dir, &config)?;
    }
    Ok(0)
}

/// Defaults of the `mmd` command: Bayes-fixedS-fast at `d = 2`, one node,
/// three privacy levels and 20 repeats.
pub fn mmd_defaults() -> ExperimentConfig {
    ExperimentConfig {
        d: 2,
        nodes: vec![1],
        epsilons: vec![0.1, 1.0, 10.0],
        methods: vec![Method::BayesFixedSFast],
        repeats: 20,
        mmd: true,
        ..ExperimentConfig::default()
    }
}

/// Writes every grid output into the resolved directory.
pub fn write_outcome(dir: &Path, config: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<()> {
    prepare_dir(dir)?;
    echo_config(dir, config)?;
    write_reports_csv(&outcome.reports, fs::File::create(dir.join("reports.csv"))?)?;
    let cells = dir.join("cells");
    prepare_dir(&cells)?;
    let mut groups: Vec<(String, Vec<&EvalReport>)> = Vec::new();
    for r in &outcome.reports {
        let name = format!("r{}_j{}_eps{}.json", r.repeat, r.nodes, r.epsilon);
        match groups.last_mut() {
            Some((n, v)) if *n == name => v.push(r),
            _ => groups.push((name, vec![r])),
        }
    }
    for (name, reports) in groups {
        write_text(&cells.join(name), &serde_json::to_string_pretty(&reports)?)?;
    }
    write_text(&dir.join("failures.json"), &serde_json::to_string_pretty(&outcome.failures)?)?;
    let summary = summarize_reports(&outcome.reports);
    write_summary(dir, &summary)
}

fn grid<W: Write>(config: &ExperimentConfig, out: &mut W) -> Result<i32> {
    let dir = resolve_output_dir(config.output_dir.as_deref());
    prepare_dir(&dir)?;
    let outcome = run_experiment(config)?;
    write_outcome(&dir, config, &outcome)?;
    write!(out, "{}", format_summary(&summarize_reports(&outcome.reports)))?;
    writeln!(out, "{} reports written to {}", outcome.reports.len(), dir.join("reports.csv").display())?;
    for f in &outcome.failures {
        eprintln!("{}", serde_json::to_string(f)?);
    }
    // Everything that succeeded is on disk; surface the first failure's kind.
    Ok(outcome.failures.first().map_or(0, |f| f.exit_code))
}

/// Timing study settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub dims: Vec<usize>,
    pub iterations: usize,
    pub n: usize,
    pub nodes: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::McmcNormalX, Method::McmcBs],
            dims: vec![2, 5, 10],
            iterations: 200,
            n: 10_000,
            nodes: 1,
            epsilon: 1.0,
            seed: 0,
            output_dir: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::Config("bench needs methods and positive dimensions".into()));
        }
        if let Some(m) = self.methods.iter().find(|m| !matches!(m, Method::McmcNormalX | Method::McmcFixedS | Method::McmcBs)) {
            return Err(Error::Config(format!("bench times MCMC samplers only, got `{m}`")));
        }
        if self.iterations < 2 || self.nodes == 0 || self.n < self.nodes * self.dims.iter().max().copied().unwrap_or(1) {
            return Err(Error::Config("bench needs ≥ 2 iterations and at least d rows per node".into()));
        }
        PrivacyBudget::new(self.epsilon, 0.5).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// One timing measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub d: usize,
    pub iterations: usize,
    pub seconds_per_iter: f64,
}

/// Times each method at each dimension on fresh simulated data. Runs are
/// sequential so timings do not compete for cores.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    config.validate()?;
    let mut rows = Vec::new();
    for &d in &config.dims {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ d as u64);
        let priors = Priors::experiment_default(random_scale_matrix(d, &mut rng));
        let (data, _) = simulate_data(config.n, d, &priors, &mut rng)?;
        let bounds = compute_bounds(&data);
        let budget = PrivacyBudget::new(config.epsilon, 1.0 / (config.n as f64).powi(2))?;
        let shards = partition(&data, config.nodes, &mut rng)?;
        let emit = |include_u: bool, rng: &mut ChaCha8Rng| -> Result<_> {
            let msgs = shards
                .iter()
                .enumerate()
                .map(|(k, s)| node_emit(format!("node-{k}"), s, &bounds, &budget, EmitOptions { include_u, noise_override: None }, rng))
                .collect::<Result<Vec<_>>>()?;
            aggregate(msgs)
        };
        let releases = emit(false, &mut rng)?.noisy_stats()?;
        let extended: Vec<ExtendedNoisyStats> = emit(true, &mut rng)?.extended_stats()?;
        let mcmc = McmcConfig::with_iterations(config.iterations);
        for &method in &config.methods {
            let start = Instant::now();
            let trace = match method {
                Method::McmcNormalX => run_mcmc_normalx(&releases, &priors, &mcmc, &mut rng)?,
                Method::McmcFixedS => crate::samplers::run_mcmc_fixeds(&releases, &priors, &mcmc, &mut rng)?,
                Method::McmcBs => run_mcmc_bs(&extended, &priors, &mcmc, &mut rng)?,
                _ => unreachable!("validated"),
            };
            let per_iter = if trace.seconds_per_iter > 0.0 {
                trace.seconds_per_iter
            } else {
                start.elapsed().as_secs_f64() / config.iterations as f64
            };
            rows.push(BenchRow { method: method.name().into(), d, iterations: config.iterations, seconds_per_iter: per_iter });
        }
    }
    Ok(rows)
}

/// `time(B&S) / time(normalX)` per dimension, when both were timed.
pub fn bench_ratios(rows: &[BenchRow]) -> Vec<(usize, f64)> {
    let find = |m: Method, d: usize| rows.iter().find(|r| r.method == m.name() && r.d == d).map(|r| r.seconds_per_iter);
    let mut dims: Vec<usize> = rows.iter().map(|r| r.d).collect();
    dims.dedup();
    dims.into_iter()
        .filter_map(|d| Some((d, find(Method::McmcBs, d)? / find(Method::McmcNormalX, d)?)))
        .collect()
}

fn bench<W: Write>(args: &BenchArgs, out: &mut W) -> Result<i32> {
    let mut c = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => BenchConfig::default(),
    };
    if let Some(v) = &args.methods {
        c.methods = v.clone();
    }
    if let Some(v) = &args.dims {
        c.dims = v.clone();
    }
    c.iterations = args.iters.unwrap_or(c.iterations);
    c.n = args.n.unwrap_or(c.n);
    c.nodes = args.nodes.unwrap_or(c.nodes);
    c.epsilon = args.eps.unwrap_or(c.epsilon);
    c.seed = args.seed.unwrap_or(c.seed);
    if args.out_dir.is_some() {
        c.output_dir = args.out_dir.clone();
    }
    let rows = run_bench(&c)?;
    let dir = resolve_output_dir(c.output_dir.as_deref());
    prepare_dir(&dir)?;
    write_text(&dir.join("bench_config.toml"), &toml::to_string_pretty(&c).map_err(|e| Error::Config(e.to_string()))?)?;
    let mut w = csv::Writer::from_path(dir.join("bench.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let ratios = bench_ratios(&rows);
    let mut w = csv::Writer::from_path(dir.join("bench_ratio.csv"))?;
    w.write_record(["d", "bs_over_normalx"])?;
    for (d, r) in &ratios {
        w.write_record([d.to_string(), r.to_string()])?;
    }
    w.flush()?;
    writeln!(out, "{:<14} {:>4} {:>16}", "method", "d", "sec/iter")?;
    for r in &rows {
        writeln!(out, "{:<14} {:>4} {:>16.3e}", r.method, r.d, r.seconds_per_iter)?;
    }
    for (d, r) in &ratios {
        writeln!(out, "d = {d}: mcmc-bs / mcmc-normalx = {r:.2}")?;
    }
    Ok(0)
}

const SUMMARY_HEADER: [&str; 15] = [
    "dataset",
    "nodes",
    "epsilon",
    "method",
    "runs",
    "mse_prediction_mean",
    "mse_prediction_lo",
    "mse_prediction_hi",
    "mse_estimation_mean",
    "mse_estimation_lo",
    "mse_estimation_hi",
    "mmd2_mean",
    "mmd2_lo",
    "mmd2_hi",
    "runtime_per_iter",
];

fn ci_cells(ci: Option<MeanCi>) -> [String; 3] {
    match ci {
        Some(c) => [c.mean.to_string(), c.lo.to_string(), c.hi.to_string()],
        None => [String::new(), String::new(), String::new()],
    }
}

/// Summary table as CSV with a fixed column order.
pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        let mut rec = vec![r.dataset.clone(), r.nodes.to_string(), r.epsilon.to_string(), r.method.clone(), r.runs.to_string()];
        rec.extend(ci_cells(Some(r.mse_prediction)));
        rec.extend(ci_cells(r.mse_estimation));
        rec.extend(ci_cells(r.mmd2));
        rec.push(r.runtime_per_iter.to_string());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Aligned text table of means and 90% intervals.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let fmt = |ci: Option<MeanCi>| match ci {
        Some(c) => format!("{:.4e} [{:.3e}, {:.3e}]", c.mean, c.lo, c.hi),
        None => "-".into(),
    };
    let mut s = format!(
        "{:<16} {:>5} {:>8} {:<18} {:>5} {:>36} {:>36} {:>36}\n",
        "dataset", "J", "epsilon", "method", "runs", "mse_prediction (90% CI)", "mse_estimation (90% CI)", "mmd2 (90% CI)"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>5} {:>8} {:<18} {:>5} {:>36} {:>36} {:>36}\n",
            r.dataset,
            r.nodes,
            r.epsilon,
            r.method,
            r.runs,
            fmt(Some(r.mse_prediction)),
            fmt(r.mse_estimation),
            fmt(r.mmd2)
        ));
    }
    s
}

fn write_summary(dir: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_text(&dir.join("summary.csv"), &summary_csv(rows)?)?;
    write_text(&dir.join("summary.txt"), &format_summary(rows))
}

/// Reads every report CSV in `dir` (files whose header starts with
/// `dataset,method`).
pub fn load_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p)?;
        if text.starts_with("dataset,method") {
            reports.extend(read_reports_csv(text.as_bytes())?);
        }
    }
    if reports.is_empty() {
        return Err(Error::Data(format!("no report CSVs found in {}", dir.display())));
    }
    Ok(reports)
}

fn report<W: Write>(dir: &Path, out: &mut W) -> Result<i32> {
    let rows = summarize_reports(&load_reports(dir)?);
    write_summary(dir, &rows)?;
    write!(out, "{}", format_summary(&rows))?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("dp-linreg").chain(args.iter().copied())).unwrap().command
    }

    #[test]
    fn flags_override_defaults() {
        let Command::Grid(a) = parse(&["grid", "--nodes", "1,5", "--eps", "0.5,2", "--methods", "adassp,mcmc-bs", "--seed", "4"]) else {
            panic!("wrong command")
        };
        let c = a.apply(ExperimentConfig::default()).unwrap();
        assert_eq!(c.nodes, vec![1, 5]);
        assert_eq!(c.epsilons, vec![0.5, 2.0]);
        assert_eq!(c.methods, vec![Method::AdaSsp, Method::McmcBs]);
        assert_eq!(c.seed, 4);
    }

    #[test]
    fn unknown_flag_and_method_are_usage_errors() {
        assert_eq!(main_with_args(["dp-linreg", "grid", "--bogus"]), 2);
        assert_eq!(main_with_args(["dp-linreg", "fit", "--method", "ols"]), 2);
    }

    #[test]
    fn data_flag_parses() {
        assert_eq!("sim".parse::<DataSource>().unwrap(), DataSource::Simulate);
        assert_eq!("a/b.csv".parse::<DataSource>().unwrap(), DataSource::Csv("a/b.csv".into()));
        assert_eq!(parse_normalization("standardize").unwrap(), Normalization::Standardize);
        assert!(parse_normalization("zscore").is_err());
    }

    #[test]
    fn summary_columns_are_stable() {
        let csv = summary_csv(&[]).unwrap();
        assert_eq!(csv.trim_end(), SUMMARY_HEADER.join(","));
    }

    #[test]
    fn bench_rejects_non_mcmc_methods() {
        let c = BenchConfig { methods: vec![Method::AdaSsp], ..BenchConfig::default() };
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }
}

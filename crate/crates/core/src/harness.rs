//! Simulated multi-party protocol and the experiment grid driver.
//!
//! Nodes turn their private shard into a [`NodeMessage`] holding only noisy
//! statistics and public metadata. The aggregator validates a batch of
//! messages into an [`AggregationSet`] without ever touching row values, and
//! the inference methods consume that set.
//!
//! # Message format
//!
//! One JSON object per line (NDJSON). Fields:
//!
//! | field            | type            | meaning                                              |
//! |------------------|-----------------|------------------------------------------------------|
//! | `schema_version` | integer         | currently `1`                                        |
//! | `node_id`        | string          | unique per node                                      |
//! | `n_rows`         | integer         | shard size (public)                                  |
//! | `d`              | integer         | number of features                                   |
//! | `s_hat`          | array of reals  | upper triangle of `Ŝ`, row-major, `d(d+1)/2` entries |
//! | `z_hat`          | array of reals  | `ẑ`, `d` entries                                     |
//! | `u_hat`          | real, optional  | noisy `yᵀy`, present only in extended releases       |
//! | `budget`         | object          | `{epsilon, delta}` applied by this node              |
//! | `bounds`         | object          | `{x_norm, y_norm}` public data bounds                |
//! | `noise_override` | real, optional  | fixed noise scale replacing the calibrated one (test mode) |
//!
//! Reals use the shortest decimal form that round-trips, so a message read
//! back is bit-identical to the one written.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{adassp_estimate, run_mcmc_bs, AdaSspConfig, ExtendedNoisyStats, LambdaMinVariant};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::metrics::{
    mmd2_median, mse_estimation, mse_prediction, nonprivate_posterior, predict, sample_posterior, EvalReport, Fitted,
    MMD_THINNING,
};
use crate::model::{
    compute_bounds, load_csv, partition, random_scale_matrix, simulate_data, simulate_from_truth, summarize,
    train_test_split, Dataset, GroundTruth, Normalization, Priors, SummaryStats,
};
use crate::privacy::{perturb_stats, DataBounds, NoiseCalibration, NoisyStats, PrivacyBudget};
use crate::samplers::{
    bayes_fixeds_fast, default_sigma_y2_tilde, run_mcmc_fixeds, run_mcmc_normalx, McmcConfig, PosteriorGaussian,
    SPrior, Trace,
};

pub const SCHEMA_VERSION: u32 = 1;

/// What one node sends to the aggregator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeMessage {
    pub schema_version: u32,
    pub node_id: String,
    pub n_rows: usize,
    pub d: usize,
    pub s_hat: Vec<f64>,
    pub z_hat: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_hat: Option<f64>,
    pub budget: PrivacyBudget,
    pub bounds: DataBounds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_override: Option<f64>,
}

impl NodeMessage {
    fn reject(&self, reason: impl Into<String>) -> Error {
        Error::Aggregation { node_id: self.node_id.clone(), reason: reason.into() }
    }

    /// Structural checks on a single message.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(self.reject(format!("schema_version {} is not supported", self.schema_version)));
        }
        if self.node_id.is_empty() {
            return Err(self.reject("node_id is empty"));
        }
        if self.d == 0 || self.n_rows == 0 {
            return Err(self.reject("d and n_rows must be positive"));
        }
        if self.s_hat.len() != self.d * (self.d + 1) / 2 {
            return Err(self.reject(format!("s_hat has {} entries, expected {} for d = {}", self.s_hat.len(), self.d * (self.d + 1) / 2, self.d)));
        }
        if self.z_hat.len() != self.d {
            return Err(self.reject(format!("z_hat has {} entries, expected d = {}", self.z_hat.len(), self.d)));
        }
        if self.s_hat.iter().chain(&self.z_hat).chain(self.u_hat.iter()).any(|v| !v.is_finite()) {
            return Err(self.reject("statistics contain non-finite values"));
        }
        self.budget.validate().map_err(|e| self.reject(format!("budget: {e}")))?;
        self.bounds.validate().map_err(|e| self.reject(format!("bounds: {e}")))?;
        if let Some(s) = self.noise_override {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(self.reject("noise_override must be a non-negative number"));
            }
        }
        Ok(())
    }

    /// Noise scales implied by the public metadata.
    pub fn calibration(&self) -> Result<NoiseCalibration> {
        let covers_u = self.u_hat.is_some();
        match self.noise_override {
            Some(sigma) => Ok(NoiseCalibration::fixed(sigma, covers_u)),
            None if covers_u => NoiseCalibration::extended(&self.budget, &self.bounds),
            None => NoiseCalibration::new(&self.budget, &self.bounds),
        }
    }

    pub fn to_noisy_stats(&self) -> Result<NoisyStats> {
        self.validate()?;
        Ok(NoisyStats {
            s_hat: SymMatrix::from_upper_triangle(self.d, &self.s_hat)?,
            z_hat: DVector::from_column_slice(&self.z_hat),
            u_hat: self.u_hat,
            n_rows: self.n_rows,
            calibration: self.calibration()?,
        })
    }
}

/// Node-side release options.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EmitOptions {
    /// Also release `yᵀy`, with the sensitivity widened to cover it.
    pub include_u: bool,
    /// Replace the calibrated noise scale. Test use only.
    pub noise_override: Option<f64>,
}

/// Computes and perturbs the shard's statistics under the full `budget`.
/// Each node must meet the global guarantee on its own, so the budget is
/// never divided among nodes.
pub fn node_emit<R: Rng + ?Sized>(
    node_id: impl Into<String>,
    shard: &Dataset,
    bounds: &DataBounds,
    budget: &PrivacyBudget,
    options: EmitOptions,
    rng: &mut R,
) -> Result<NodeMessage> {
    let node_id = node_id.into();
    bounds.validate()?;
    budget.validate()?;
    check_bounds(shard, bounds).map_err(|reason| Error::Data(format!("node `{node_id}`: {reason}")))?;
    let calib = match options.noise_override {
        Some(sigma) if sigma >= 0.0 && sigma.is_finite() => NoiseCalibration::fixed(sigma, options.include_u),
        Some(sigma) => return Err(Error::invalid(format!("noise override must be non-negative, got {sigma}"))),
        None if options.include_u => NoiseCalibration::extended(budget, bounds)?,
        None => NoiseCalibration::new(budget, bounds)?,
    };
    let noisy = perturb_stats(&summarize(shard, options.include_u), &calib, rng, options.include_u)?;
    Ok(NodeMessage {
        schema_version: SCHEMA_VERSION,
        node_id,
        n_rows: noisy.n_rows,
        d: noisy.dim(),
        s_hat: noisy.s_hat.upper_triangle(),
        z_hat: noisy.z_hat.iter().copied().collect(),
        u_hat: noisy.u_hat,
        budget: *budget,
        bounds: *bounds,
        noise_override: options.noise_override,
    })
}

// Reports row indices only; values must not leak into error text.
fn check_bounds(shard: &Dataset, bounds: &DataBounds) -> std::result::Result<(), String> {
    let slack = 1.0 + 1e-9;
    for (i, row) in shard.x().row_iter().enumerate() {
        if row.norm() > bounds.x_norm * slack {
            return Err(format!("row {i} exceeds the feature norm bound"));
        }
    }
    if let Some(i) = shard.y().iter().position(|v| v.abs() > bounds.y_norm * slack) {
        return Err(format!("row {i} exceeds the response bound"));
    }
    Ok(())
}

pub fn write_ndjson<W: Write>(messages: &[NodeMessage], mut writer: W) -> Result<()> {
    for m in messages {
        serde_json::to_writer(&mut writer, m)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads messages, one per non-blank line.
pub fn read_ndjson<R: BufRead>(reader: R) -> Result<Vec<NodeMessage>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let msg = serde_json::from_str(&line).map_err(|e| Error::Data(format!("message on line {}: {e}", i + 1)))?;
        out.push(msg);
    }
    Ok(out)
}

/// Validated messages from every node, kept individually.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationSet {
    messages: Vec<NodeMessage>,
    d: usize,
    n_total: usize,
}

impl AggregationSet {
    pub fn messages(&self) -> &[NodeMessage] {
        &self.messages
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn budget(&self) -> PrivacyBudget {
        self.messages[0].budget
    }

    pub fn bounds(&self) -> DataBounds {
        self.messages[0].bounds
    }

    pub fn noisy_stats(&self) -> Result<Vec<NoisyStats>> {
        self.messages.iter().map(NodeMessage::to_noisy_stats).collect()
    }

    /// Per-node `(Ŝ, ẑ, û)` releases; fails unless every node released `û`.
    pub fn extended_stats(&self) -> Result<Vec<ExtendedNoisyStats>> {
        self.messages
            .iter()
            .map(|m| {
                let stats = m.to_noisy_stats()?;
                ExtendedNoisyStats::try_from(&stats).map_err(|e| m.reject(e.to_string()))
            })
            .collect()
    }
}

/// Validates a batch of messages. Nodes must agree on `d`, bounds, budget,
/// noise mode and whether `û` is released; ids must be unique.
pub fn aggregate(messages: Vec<NodeMessage>) -> Result<AggregationSet> {
    let first = messages.first().ok_or_else(|| Error::invalid("no messages to aggregate"))?.clone();
    let mut seen = HashSet::new();
    let mut n_total = 0;
    for m in &messages {
        m.validate()?;
        if !seen.insert(m.node_id.as_str()) {
            return Err(m.reject("duplicate node_id"));
        }
        if m.d != first.d {
            return Err(m.reject(format!("d = {} differs from d = {} of node `{}`", m.d, first.d, first.node_id)));
        }
        if m.bounds != first.bounds {
            return Err(m.reject(format!("bounds differ from those of node `{}`", first.node_id)));
        }
        if m.budget != first.budget {
            return Err(m.reject(format!("budget differs from that of node `{}`", first.node_id)));
        }
        if m.noise_override != first.noise_override {
            return Err(m.reject(format!("noise_override differs from that of node `{}`", first.node_id)));
        }
        if m.u_hat.is_some() != first.u_hat.is_some() {
            return Err(m.reject(format!("u_hat presence differs from that of node `{}`", first.node_id)));
        }
        n_total += m.n_rows;
    }
    Ok(AggregationSet { d: first.d, n_total, messages })
}

/// Inference methods available to the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "bayes-fixeds-fast")]
    BayesFixedSFast,
    #[serde(rename = "mcmc-fixeds")]
    McmcFixedS,
    #[serde(rename = "mcmc-normalx")]
    McmcNormalX,
    #[serde(rename = "mcmc-bs")]
    McmcBs,
    #[serde(rename = "adassp")]
    AdaSsp,
    #[serde(rename = "nonprivate")]
    NonPrivate,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::BayesFixedSFast, Method::McmcFixedS, Method::McmcNormalX, Method::McmcBs, Method::AdaSsp, Method::NonPrivate];

    pub fn name(self) -> &'static str {
        match self {
            Method::BayesFixedSFast => "bayes-fixeds-fast",
            Method::McmcFixedS => "mcmc-fixeds",
            Method::McmcNormalX => "mcmc-normalx",
            Method::McmcBs => "mcmc-bs",
            Method::AdaSsp => "adassp",
            Method::NonPrivate => "nonprivate",
        }
    }

    fn index(self) -> u64 {
        Method::ALL.iter().position(|&m| m == self).expect("listed") as u64
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`; expected one of {}", Method::ALL.map(Method::name).join(", "))))
    }
}

/// A fitted model.
#[derive(Debug, Clone)]
pub enum FitResult {
    Gaussian(PosteriorGaussian),
    Trace(Trace),
    Point(DVector<f64>),
}

impl FitResult {
    pub fn fitted(&self) -> Fitted<'_> {
        match self {
            FitResult::Gaussian(p) => Fitted::Gaussian(p),
            FitResult::Trace(t) => Fitted::Trace(t),
            FitResult::Point(v) => Fitted::Point(v),
        }
    }

    pub fn theta_hat(&self) -> DVector<f64> {
        self.fitted().theta_hat()
    }

    /// Posterior samples for MMD: fresh draws from a Gaussian posterior, or
    /// the thinned post-burn-in trace. Point estimates have none.
    pub fn posterior_samples<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Option<Vec<DVector<f64>>> {
        match self {
            FitResult::Gaussian(p) => Some(sample_posterior(p, k, rng)),
            FitResult::Trace(t) => Some(t.thinned(MMD_THINNING)),
            FitResult::Point(_) => None,
        }
    }
}

/// Everything a method may read. Private methods see only the releases;
/// adaSSP runs its own node protocol on the shards, and the non-private
/// reference reads them directly.
#[derive(Debug, Clone, Copy)]
pub struct FitInputs<'a> {
    pub shards: &'a [Dataset],
    pub releases: &'a [NoisyStats],
    pub extended: &'a [ExtendedNoisyStats],
    pub bounds: DataBounds,
    pub budget: PrivacyBudget,
    pub priors: &'a Priors,
    pub mcmc: &'a McmcConfig,
    pub adassp: &'a AdaSspConfig,
    /// Plug-in `σ̃_y²` for Bayes-fixedS-fast.
    pub sigma_y2_tilde: f64,
    /// Noise variance assumed by the non-private reference.
    pub sigma_y2_reference: f64,
}

pub fn fit_method<R: Rng + ?Sized>(method: Method, inputs: &FitInputs<'_>, rng: &mut R) -> Result<FitResult> {
    match method {
        Method::BayesFixedSFast => bayes_fixeds_fast(inputs.releases, inputs.priors, inputs.sigma_y2_tilde).map(FitResult::Gaussian),
        Method::McmcFixedS => run_mcmc_fixeds(inputs.releases, inputs.priors, inputs.mcmc, rng).map(FitResult::Trace),
        Method::McmcNormalX => run_mcmc_normalx(inputs.releases, inputs.priors, inputs.mcmc, rng).map(FitResult::Trace),
        Method::McmcBs => run_mcmc_bs(inputs.extended, inputs.priors, inputs.mcmc, rng).map(FitResult::Trace),
        Method::AdaSsp => adassp_estimate(inputs.shards, &inputs.bounds, inputs.adassp, rng).map(FitResult::Point),
        Method::NonPrivate => {
            let stats = shard_stats(inputs.shards)?;
            nonprivate_posterior(&stats, inputs.sigma_y2_reference, inputs.priors).map(FitResult::Gaussian)
        }
    }
}

fn shard_stats(shards: &[Dataset]) -> Result<SummaryStats> {
    let parts: Vec<_> = shards.iter().map(|s| summarize(s, false)).collect();
    SummaryStats::sum(&parts)
}

/// Where the data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[derive(Default)]
pub enum DataSource {
    /// Fresh synthetic data per repeat.
    #[default]
    Simulate,
    /// A numeric CSV whose last column is the response.
    Csv(PathBuf),
}


impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "" => Err(Error::Config("empty data source".into())),
            "sim" | "simulate" => Ok(DataSource::Simulate),
            path => Ok(DataSource::Csv(PathBuf::from(path))),
        }
    }
}

/// Grid specification, loadable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Training rows for simulated data.
    pub n: usize,
    /// Features for simulated data.
    pub d: usize,
    /// Held-out share: simulated test sets have `round(n·test_fraction)`
    /// rows; CSV data are split with this fraction per repeat.
    pub test_fraction: f64,
    pub nodes: Vec<usize>,
    pub epsilons: Vec<f64>,
    /// `1/n²` when absent.
    pub delta: Option<f64>,
    pub methods: Vec<Method>,
    pub iterations: usize,
    pub burn_in: Option<usize>,
    pub s_prior: SPrior,
    pub literal_bn: bool,
    pub repeats: usize,
    /// Draw fresh data (and a fresh partition) for every repeat. When off,
    /// one dataset is drawn from the master seed and repeats differ only in
    /// their privacy noise and sampler randomness.
    pub resample_data: bool,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub normalization: Normalization,
    /// Score each posterior by MMD² against the non-private one.
    pub mmd: bool,
    /// Draws taken from Gaussian posteriors for MMD.
    pub mmd_samples: usize,
    /// Release exact statistics. Test use only.
    pub noiseless: bool,
    pub rho: f64,
    pub lambda_min_variant: LambdaMinVariant,
    /// Overrides `‖Y‖/3` as the plug-in `σ̃_y²`.
    pub sigma_y2_tilde: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Simulate,
            n: 10_000,
            d: 2,
            test_fraction: 0.2,
            nodes: vec![1, 5, 10],
            epsilons: vec![0.1, 1.0, 10.0],
            delta: None,
            methods: vec![Method::BayesFixedSFast, Method::McmcFixedS, Method::McmcNormalX, Method::McmcBs, Method::AdaSsp],
            iterations: 2_000,
            burn_in: None,
            s_prior: SPrior::default(),
            literal_bn: false,
            repeats: 10,
            resample_data: false,
            seed: 0,
            output_dir: None,
            normalization: Normalization::default(),
            mmd: false,
            mmd_samples: 200,
            noiseless: false,
            rho: 0.05,
            lambda_min_variant: LambdaMinVariant::default(),
            sigma_y2_tilde: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `.json` files as JSON and anything else as TOML.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if matches!(self.data, DataSource::Simulate) && (self.n < 2 || self.d == 0) {
            return bad(format!("simulated data need n ≥ 2 and d ≥ 1, got n = {}, d = {}", self.n, self.d));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.nodes.is_empty() || self.nodes.contains(&0) || self.nodes.len() > 255 {
            return bad("nodes must list between 1 and 255 positive node counts".into());
        }
        if self.epsilons.is_empty() || self.epsilons.len() > 255 {
            return bad("epsilons must list between 1 and 255 values".into());
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return bad(format!("ε must be positive and finite, got {e}"));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return bad(format!("δ must lie in (0, 1), got {d}"));
            }
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.repeats == 0 || self.repeats >= 1 << 24 {
            return bad(format!("repeats must lie in [1, 2^24), got {}", self.repeats));
        }
        if self.mmd && self.mmd_samples < 2 {
            return bad("mmd_samples must be at least 2".into());
        }
        if let Some(s) = self.sigma_y2_tilde {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("sigma_y2_tilde must be positive, got {s}"));
            }
        }
        self.mcmc().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.adassp(PrivacyBudget { epsilon: 1.0, delta: 0.5 }).validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn mcmc(&self) -> McmcConfig {
        McmcConfig {
            iterations: self.iterations,
            burn_in: self.burn_in,
            s_prior: self.s_prior,
            literal_bn: self.literal_bn,
            ..McmcConfig::default()
        }
    }

    fn adassp(&self, budget: PrivacyBudget) -> AdaSspConfig {
        AdaSspConfig { rho: self.rho, lambda_min_variant: self.lambda_min_variant, noiseless: self.noiseless, ..AdaSspConfig::new(budget) }
    }

    /// Label used in reports.
    pub fn dataset_label(&self) -> String {
        match &self.data {
            DataSource::Simulate => format!("sim-n{}-d{}", self.n, self.d),
            DataSource::Csv(p) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into()),
        }
    }
}

/// A grid cell or method run that failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub repeat: usize,
    pub nodes: Option<usize>,
    pub epsilon: Option<f64>,
    pub method: Option<String>,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentOutcome {
    pub reports: Vec<EvalReport>,
    pub failures: Vec<CellFailure>,
}

/// Independent random streams keyed by position in the grid, so results do
/// not depend on scheduling or on which other methods are configured.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Data,
    Partition,
    Release,
    ExtendedRelease,
    Method,
    Reference,
}

fn stream_rng(seed: u64, kind: Stream, repeat: usize, j_idx: usize, e_idx: usize, method: u64) -> ChaCha8Rng {
    let id = (kind as u64) << 56 | (repeat as u64) << 32 | (j_idx as u64) << 24 | (e_idx as u64) << 16 | method << 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Data for one repeat, shared by every cell of that repeat.
#[derive(Debug, Clone)]
pub struct RepeatData {
    pub train: Dataset,
    pub test: Dataset,
    pub truth: Option<GroundTruth>,
    pub priors: Priors,
    pub bounds: DataBounds,
    pub sigma_y2_reference: f64,
}

/// Residual variance of the least-squares fit, `‖y − Xβ̂‖²/(n − d)`.
pub fn ols_residual_variance(data: &Dataset) -> Result<f64> {
    let (n, d) = (data.n_rows(), data.dim());
    if n <= d {
        return Err(Error::invalid(format!("residual variance needs n > d, got n = {n}, d = {d}")));
    }
    let beta = data
        .x()
        .tr_mul(data.x())
        .lu()
        .solve(&data.x().tr_mul(data.y()))
        .ok_or_else(|| Error::numerical("XᵀX is singular"))?;
    let r = data.y() - data.x() * beta;
    Ok(r.norm_squared() / (n - d) as f64)
}

impl ExperimentConfig {
    /// Index of the dataset used by `repeat`.
    fn data_index(&self, repeat: usize) -> usize {
        if self.resample_data {
            repeat
        } else {
            0
        }
    }
}

fn prepare_repeat(config: &ExperimentConfig, base: Option<&Dataset>, repeat: usize) -> Result<RepeatData> {
    let mut rng = stream_rng(config.seed, Stream::Data, config.data_index(repeat), 0, 0, 0);
    match base {
        None => {
            let d = config.d;
            let gen = Priors::experiment_default(random_scale_matrix(d, &mut rng));
            let (train, truth) = simulate_data(config.n, d, &gen, &mut rng)?;
            let n_test = ((config.n as f64) * config.test_fraction).round().max(1.0) as usize;
            let test = simulate_from_truth(n_test, &truth, &mut rng)?;
            let bounds = compute_bounds(&train);
            Ok(RepeatData { train, test, sigma_y2_reference: truth.sigma_y2, truth: Some(truth), priors: gen, bounds })
        }
        Some(data) => {
            let (train, test) = train_test_split(data, config.test_fraction, &mut rng)?;
            let d = train.dim();
            // A unit scale matrix suits features normalised to a common range.
            let priors = Priors::experiment_default(crate::linalg::PsdMatrix::identity(d));
            let bounds = compute_bounds(&train);
            let sigma_y2_reference = ols_residual_variance(&train)?;
            Ok(RepeatData { train, test, truth: None, priors, bounds, sigma_y2_reference })
        }
    }
}

/// Default `δ = 1/n²` for a training set of `n` rows.
pub fn default_delta(n: usize) -> f64 {
    1.0 / (n as f64 * n as f64)
}

struct Cell {
    repeat: usize,
    j_idx: usize,
    e_idx: usize,
}

/// Runs the full grid: data once (or per repeat with `resample_data`), then for every `(J, ε)` the nodes
/// emit, the aggregator validates, and every configured method is fitted and
/// scored. Failures are recorded per cell or per method without stopping
/// the grid. Cells run in parallel; results are in grid order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let base = match &config.data {
        DataSource::Simulate => None,
        DataSource::Csv(path) => Some(config.normalization.apply(&load_csv(path)?)?),
    };
    let datasets: Vec<Result<RepeatData>> = (0..config.data_index(config.repeats - 1) + 1)
        .into_par_iter()
        .map(|r| prepare_repeat(config, base.as_ref(), r))
        .collect();

    let cells: Vec<Cell> = (0..config.repeats)
        .flat_map(|repeat| {
            (0..config.nodes.len()).flat_map(move |j_idx| (0..config.epsilons.len()).map(move |e_idx| Cell { repeat, j_idx, e_idx }))
        })
        .collect();

    let results: Vec<(Vec<EvalReport>, Vec<CellFailure>)> = cells
        .par_iter()
        .map(|cell| {
            let nodes = config.nodes[cell.j_idx];
            let epsilon = config.epsilons[cell.e_idx];
            let fail = |e: &Error, method: Option<Method>| CellFailure {
                repeat: cell.repeat,
                nodes: Some(nodes),
                epsilon: Some(epsilon),
                method: method.map(|m| m.name().to_string()),
                error: e.to_string(),
                exit_code: e.exit_code(),
            };
            match &datasets[config.data_index(cell.repeat)] {
                Err(e) => (Vec::new(), vec![fail(e, None)]),
                Ok(data) => match run_cell(config, data, cell) {
                    Err(e) => (Vec::new(), vec![fail(&e, None)]),
                    Ok(per_method) => {
                        let mut reports = Vec::new();
                        let mut failures = Vec::new();
                        for (m, r) in per_method {
                            match r {
                                Ok((_, rep)) => reports.push(rep),
                                Err(e) => failures.push(fail(&e, Some(m))),
                            }
                        }
                        (reports, failures)
                    }
                },
            }
        })
        .collect();

    let mut outcome = ExperimentOutcome::default();
    for (r, f) in results {
        outcome.reports.extend(r);
        outcome.failures.extend(f);
    }
    Ok(outcome)
}

type MethodResults = Vec<(Method, Result<(FitResult, EvalReport)>)>;

fn run_cell(config: &ExperimentConfig, data: &RepeatData, cell: &Cell) -> Result<MethodResults> {
    let nodes = config.nodes[cell.j_idx];
    let epsilon = config.epsilons[cell.e_idx];
    let delta = config.delta.unwrap_or_else(|| default_delta(data.train.n_rows()));
    let budget = PrivacyBudget::new(epsilon, delta)?;
    let shards = partition(&data.train, nodes, &mut stream_rng(config.seed, Stream::Partition, config.data_index(cell.repeat), cell.j_idx, 0, 0))?;

    let override_ = config.noiseless.then_some(0.0);
    let emit_all = |include_u: bool, kind: Stream| -> Result<AggregationSet> {
        let mut rng = stream_rng(config.seed, kind, cell.repeat, cell.j_idx, cell.e_idx, 0);
        let opts = EmitOptions { include_u, noise_override: override_ };
        let msgs = shards
            .iter()
            .enumerate()
            .map(|(k, s)| node_emit(format!("node-{k}"), s, &data.bounds, &budget, opts, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        aggregate(msgs)
    };
    // The proposed methods share one release; the baseline needs its own
    // release of (S, z, u) with a wider sensitivity.
    let releases = emit_all(false, Stream::Release)?.noisy_stats()?;
    let extended = if config.methods.contains(&Method::McmcBs) {
        emit_all(true, Stream::ExtendedRelease)?.extended_stats()?
    } else {
        Vec::new()
    };

    let mcmc = config.mcmc();
    let adassp = config.adassp(budget);
    let inputs = FitInputs {
        shards: &shards,
        releases: &releases,
        extended: &extended,
        bounds: data.bounds,
        budget,
        priors: &data.priors,
        mcmc: &mcmc,
        adassp: &adassp,
        sigma_y2_tilde: config.sigma_y2_tilde.unwrap_or_else(|| default_sigma_y2_tilde(data.bounds.y_norm)),
        sigma_y2_reference: data.sigma_y2_reference,
    };
    let reference = if config.mmd {
        let stats = shard_stats(&shards)?;
        Some(nonprivate_posterior(&stats, data.sigma_y2_reference, &data.priors)?)
    } else {
        None
    };

    Ok(config
        .methods
        .iter()
        .map(|&method| {
            let report = (|| {
                let mut rng = stream_rng(config.seed, Stream::Method, cell.repeat, cell.j_idx, cell.e_idx, method.index());
                let start = Instant::now();
                let fit = fit_method(method, &inputs, &mut rng)?;
                let elapsed = start.elapsed().as_secs_f64();
                let runtime_per_iter = match &fit {
                    FitResult::Trace(t) => t.seconds_per_iter,
                    _ => elapsed,
                };
                let mmd2 = match &reference {
                    None => None,
                    Some(reference) => {
                        let mut rrng = stream_rng(config.seed, Stream::Reference, cell.repeat, cell.j_idx, cell.e_idx, method.index());
                        match fit.posterior_samples(config.mmd_samples, &mut rrng) {
                            Some(p) => {
                                let q = sample_posterior(reference, p.len(), &mut rrng);
                                Some(mmd2_median(&p, &q)?)
                            }
                            None => None,
                        }
                    }
                };
                let theta_hat = fit.theta_hat();
                let report = EvalReport {
                    dataset: config.dataset_label(),
                    method: method.name().to_string(),
                    nodes,
                    epsilon,
                    delta,
                    repeat: cell.repeat,
                    seed: config.seed,
                    mse_estimation: data.truth.as_ref().map(|t| mse_estimation(&theta_hat, &t.theta)).transpose()?,
                    mse_prediction: mse_prediction(&predict(fit.fitted(), data.test.x())?, data.test.y())?,
                    mmd2,
                    runtime_per_iter,
                };
                Ok((fit, report))
            })();
            (method, report)
        })
        .collect())
}

/// Fits one method on the first cell of the grid (first repeat, first `J`,
/// first `ε`), exactly as [`run_experiment`] would.
pub fn fit_single(config: &ExperimentConfig, method: Method) -> Result<(FitResult, EvalReport, RepeatData)> {
    let config = ExperimentConfig { methods: vec![method], ..config.clone() };
    let data = repeat_data(&config, 0)?;
    let mut results = run_cell(&config, &data, &Cell { repeat: 0, j_idx: 0, e_idx: 0 })?;
    let (_, result) = results.pop().expect("one method configured");
    let (fit, report) = result?;
    Ok((fit, report, data))
}

/// Prepares the data of a single repeat, as the grid would.
pub fn repeat_data(config: &ExperimentConfig, repeat: usize) -> Result<RepeatData> {
    config.validate()?;
    let base = match &config.data {
        DataSource::Simulate => None,
        DataSource::Csv(path) => Some(config.normalization.apply(&load_csv(path)?)?),
    };
    prepare_repeat(config, base.as_ref(), repeat)
}

pub fn write_reports_csv<W: Write>(reports: &[EvalReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv<R: std::io::Read>(reader: R) -> Result<Vec<EvalReport>> {
    csv::Reader::from_reader(reader).deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn shard(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() - 0.5);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        Dataset::new(x, y).unwrap()
    }

    fn budget() -> PrivacyBudget {
        PrivacyBudget::new(1.0, 1e-6).unwrap()
    }

    fn emit(id: &str, data: &Dataset, opts: EmitOptions, seed: u64) -> NodeMessage {
        let b = compute_bounds(data);
        node_emit(id, data, &b, &budget(), opts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn ndjson_round_trip_is_bit_exact() {
        let data = shard(1, 40);
        let msgs = vec![emit("a", &data, EmitOptions::default(), 3), emit("b", &data, EmitOptions { include_u: true, ..Default::default() }, 4)];
        let mut buf = Vec::new();
        write_ndjson(&msgs, &mut buf).unwrap();
        let back = read_ndjson(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in msgs.iter().zip(&back) {
            assert_eq!(a, b);
            for (x, y) in a.s_hat.iter().chain(&a.z_hat).zip(b.s_hat.iter().chain(&b.z_hat)) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_noise_override_releases_exact_stats() {
        let data = shard(2, 30);
        let msg = emit("a", &data, EmitOptions { include_u: false, noise_override: Some(0.0) }, 0);
        let exact = summarize(&data, false);
        assert_eq!(msg.s_hat, exact.s.upper_triangle());
        assert_eq!(msg.z_hat, exact.z.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn emission_is_deterministic() {
        let data = shard(5, 25);
        assert_eq!(emit("a", &data, EmitOptions::default(), 9), emit("a", &data, EmitOptions::default(), 9));
    }

    #[test]
    fn full_budget_per_node() {
        let data = shard(6, 25);
        let msg = emit("a", &data, EmitOptions::default(), 1);
        let direct = NoiseCalibration::new(&budget(), &msg.bounds).unwrap();
        assert_eq!(msg.calibration().unwrap(), direct);
    }

    #[test]
    fn out_of_bounds_shard_is_rejected() {
        let data = shard(7, 10);
        let tight = DataBounds::new(0.01, 10.0).unwrap();
        let err = node_emit("a", &data, &tight, &budget(), EmitOptions::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn aggregate_singleton_and_totals() {
        let data = shard(8, 20);
        let set = aggregate(vec![emit("only", &data, EmitOptions::default(), 0)]).unwrap();
        assert_eq!((set.len(), set.n_total(), set.dim()), (1, 20, 2));

        let b = DataBounds::new(1.0, 1.0).unwrap();
        let msgs: Vec<_> = (0..10)
            .map(|k| {
                let s = shard(100 + k as u64, 20 + k);
                node_emit(format!("n{k}"), &s, &b, &budget(), EmitOptions::default(), &mut ChaCha8Rng::seed_from_u64(k as u64)).unwrap()
            })
            .collect();
        let set = aggregate(msgs).unwrap();
        assert_eq!(set.len(), 10);
        assert_eq!(set.n_total(), (0..10).map(|k| 20 + k).sum::<usize>());
        assert_eq!(set.noisy_stats().unwrap().len(), 10);
    }

    #[test]
    fn aggregate_names_offending_node() {
        let two = shard(9, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x3 = DMatrix::from_fn(20, 3, |_, _| rng.random::<f64>() * 0.1);
        let three = Dataset::new(x3, two.y().clone()).unwrap();
        let b = DataBounds::new(2.0, 2.0).unwrap();
        let m2 = node_emit("two", &two, &b, &budget(), EmitOptions::default(), &mut rng).unwrap();
        let m3 = node_emit("three", &three, &b, &budget(), EmitOptions::default(), &mut rng).unwrap();
        match aggregate(vec![m2.clone(), m3]).unwrap_err() {
            Error::Aggregation { node_id, reason } => {
                assert_eq!(node_id, "three");
                assert!(reason.contains("d = 3"));
            }
            e => panic!("unexpected error {e}"),
        }
        match aggregate(vec![m2.clone(), m2.clone()]).unwrap_err() {
            Error::Aggregation { node_id, reason } => assert!(node_id == "two" && reason.contains("duplicate")),
            e => panic!("unexpected error {e}"),
        }
        let mut other = m2.clone();
        other.node_id = "other".into();
        other.budget.epsilon = 2.0;
        assert!(matches!(aggregate(vec![m2.clone(), other]), Err(Error::Aggregation { ref node_id, .. }) if node_id == "other"));
        let mut other = m2.clone();
        other.node_id = "wide".into();
        other.bounds.x_norm = 3.0;
        assert!(matches!(aggregate(vec![m2, other]), Err(Error::Aggregation { ref node_id, .. }) if node_id == "wide"));
        assert!(aggregate(Vec::new()).is_err());
    }

    #[test]
    fn malformed_message_is_rejected() {
        let data = shard(10, 20);
        let mut m = emit("a", &data, EmitOptions::default(), 0);
        m.z_hat.push(0.0);
        assert!(aggregate(vec![m]).is_err());
        assert!(read_ndjson("{\"node_id\": 3}\n".as_bytes()).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("ols".parse::<Method>().is_err());
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            n: 400,
            d: 2,
            nodes: vec![2],
            epsilons: vec![0.5, 5.0],
            methods: vec![Method::BayesFixedSFast, Method::AdaSsp],
            repeats: 1,
            iterations: 50,
            seed: 11,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn grid_produces_one_report_per_method_and_cell() {
        let out = run_experiment(&tiny_config()).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        assert_eq!(out.reports.len(), 4);
        let eps: Vec<f64> = out.reports.iter().map(|r| r.epsilon).collect();
        assert_eq!(eps, vec![0.5, 0.5, 5.0, 5.0]);
        assert_eq!(out.reports[0].method, "bayes-fixeds-fast");
        assert_eq!(out.reports[1].method, "adassp");
        assert!(out.reports.iter().all(|r| r.nodes == 2 && r.delta == 1.0 / (400.0 * 400.0)));
    }

    #[test]
    fn noiseless_fast_matches_reference() {
        let cfg = ExperimentConfig {
            noiseless: true,
            sigma_y2_tilde: Some(1.0),
            epsilons: vec![1.0],
            methods: vec![Method::BayesFixedSFast, Method::NonPrivate],
            ..tiny_config()
        };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.reports.len(), 2);
        let (a, b) = (&out.reports[0], &out.reports[1]);
        assert!((a.mse_prediction - b.mse_prediction).abs() <= 1e-8 * b.mse_prediction);
    }

    #[test]
    fn grid_is_deterministic_and_independent_of_method_list() {
        let cfg = tiny_config();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        let key = |r: &EvalReport| (r.method.clone(), r.mse_prediction.to_bits());
        assert_eq!(a.reports.iter().map(key).collect::<Vec<_>>(), b.reports.iter().map(key).collect::<Vec<_>>());
        let only_ada = run_experiment(&ExperimentConfig { methods: vec![Method::AdaSsp], ..cfg }).unwrap();
        assert_eq!(only_ada.reports[0].mse_prediction.to_bits(), a.reports[1].mse_prediction.to_bits());
    }

    #[test]
    fn method_failures_do_not_abort_grid() {
        // One row per node is too few for MCMC-normalX at d = 2.
        let cfg = ExperimentConfig {
            n: 10,
            test_fraction: 0.5,
            nodes: vec![10],
            epsilons: vec![1.0],
            methods: vec![Method::McmcNormalX, Method::BayesFixedSFast],
            ..tiny_config()
        };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].method.as_deref(), Some("mcmc-normalx"));
        assert_eq!(out.reports.len(), 1);
    }

    #[test]
    fn config_parses_from_toml_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::from_toml_str(
            "data = \"simulate\"\nn = 500\nnodes = [1, 5]\nepsilons = [0.1, 10.0]\nmethods = [\"adassp\", \"mcmc-bs\"]\n",
        )
        .unwrap();
        assert_eq!(cfg.methods, vec![Method::AdaSsp, Method::McmcBs]);
        let csv = ExperimentConfig::from_toml_str("data = { csv = \"x.csv\" }\n").unwrap();
        assert_eq!(csv.data, DataSource::Csv("x.csv".into()));
        assert_eq!(ExperimentConfig::from_toml_str("bogus = 1\n").unwrap_err().exit_code(), 2);
        assert!(ExperimentConfig::from_toml_str("epsilons = [-1.0]\n").is_err());
        let echoed = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn reports_csv_round_trip() {
        let out = run_experiment(&tiny_config()).unwrap();
        let mut buf = Vec::new();
        write_reports_csv(&out.reports, &mut buf).unwrap();
        assert_eq!(read_reports_csv(buf.as_slice()).unwrap(), out.reports);
    }
}

//! Posterior inference for `θ` from perturbed per-node statistics.
//!
//! Three algorithms share the building blocks in [`conditionals`] and
//! [`moves`]:
//!
//! * [`run_mcmc_normalx`]: Gibbs sweep over `Σ_x`, every `S_j`, `θ` and `σ_y²`
//!   assuming normally distributed features.
//! * [`run_mcmc_fixeds`]: the same sweep with each `S_j` fixed at the
//!   nearest PSD matrix to its noisy release.
//! * [`bayes_fixeds_fast`]: closed-form Gaussian posterior of `θ` with
//!   `σ_y²` also fixed.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{PsdMatrix, SymMatrix};

pub mod conditionals;
mod fixeds;
pub mod moves;
mod normalx;

pub use conditionals::{loglik_zhat, sigma_x_conditional, theta_conditional};
pub use fixeds::{bayes_fixeds_fast, default_sigma_y2_tilde, estimate_s, run_mcmc_fixeds};
pub use moves::{adapt_proposals, mh_update_s, mh_update_sigma_y, wishart_proposal_log_ratio, MoveOutcome};
pub use normalx::{run_mcmc_normalx, NormalXSampler};

/// Gaussian posterior of `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGaussian {
    pub mean: DVector<f64>,
    pub cov: PsdMatrix,
}

impl PosteriorGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Accepted / proposed counts for one kind of MH move.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptCounter {
    pub accepted: u64,
    pub proposed: u64,
}

impl AcceptCounter {
    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }
}

/// Proposal tuning parameters and acceptance bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    /// Concentration `α` of the Wishart proposal `W(S/α, α)`.
    pub alpha: f64,
    /// Lower bound on `α`, `d + 2`.
    pub alpha_min: f64,
    /// Standard deviation of the `σ_y²` random walk.
    pub sigma_q: f64,
    /// Number of adaptation steps taken so far.
    pub steps: u64,
    pub s_moves: AcceptCounter,
    pub sigma_y2_moves: AcceptCounter,
    pub(crate) s_window: AcceptCounter,
    pub(crate) sigma_y2_window: AcceptCounter,
}

impl AdaptState {
    pub fn new(d: usize, alpha: f64, sigma_q: f64) -> Result<Self> {
        let alpha_min = d as f64 + 2.0;
        if !(alpha >= alpha_min && alpha.is_finite()) {
            return Err(Error::invalid(format!("proposal concentration α must be at least d + 2 = {alpha_min}, got {alpha}")));
        }
        if !(sigma_q > 0.0 && sigma_q.is_finite()) {
            return Err(Error::invalid(format!("random-walk scale must be positive, got {sigma_q}")));
        }
        Ok(Self {
            alpha,
            alpha_min,
            sigma_q,
            steps: 0,
            s_moves: AcceptCounter::default(),
            sigma_y2_moves: AcceptCounter::default(),
            s_window: AcceptCounter::default(),
            sigma_y2_window: AcceptCounter::default(),
        })
    }

    pub(crate) fn record_s(&mut self, accepted: bool) {
        self.s_moves.record(accepted);
        self.s_window.record(accepted);
    }

    pub(crate) fn record_sigma_y2(&mut self, accepted: bool) {
        self.sigma_y2_moves.record(accepted);
        self.sigma_y2_window.record(accepted);
    }

    /// Adapts on the acceptance rates of the current window and starts a new one.
    pub(crate) fn end_window(&mut self) {
        let next = adapt_proposals(self, self.s_window.rate(), self.sigma_y2_window.rate());
        *self = next;
        self.s_window = AcceptCounter::default();
        self.sigma_y2_window = AcceptCounter::default();
    }
}

/// Latent variables of the reduced model.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub theta: DVector<f64>,
    pub sigma_y2: f64,
    pub sigma_x: PsdMatrix,
    pub s_list: Vec<PsdMatrix>,
    pub adapt: AdaptState,
}

/// Which conditional prior `p(S_j | Σ_x)` the `S_j` move targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SPrior {
    /// `W(S_j; Σ_x, n_j)`, the distribution of `X_jᵀX_j` for normal rows.
    #[default]
    GramWishart,
    /// `W(S_j; n_j Σ_x, κ)`, kept for comparison.
    ScaledKappa,
}

/// Run-length and tuning settings shared by the MCMC samplers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub iterations: usize,
    /// Burn-in length; 20% of `iterations` when absent.
    pub burn_in: Option<usize>,
    /// Adapt proposal scales during burn-in.
    pub adapt: bool,
    /// Iterations per adaptation window.
    pub adapt_window: usize,
    pub initial_alpha: Option<f64>,
    pub initial_sigma_q: Option<f64>,
    pub s_prior: SPrior,
    /// Hold `σ_y²` at this value instead of sampling it.
    pub fixed_sigma_y2: Option<f64>,
    /// Store every `Σ_x` draw in the trace.
    pub record_sigma_x: bool,
    /// Use the literal `b_n` expression in the summary-statistics baseline.
    pub literal_bn: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            burn_in: None,
            adapt: true,
            adapt_window: 10,
            initial_alpha: None,
            initial_sigma_q: None,
            s_prior: SPrior::default(),
            fixed_sigma_y2: None,
            record_sigma_x: false,
            literal_bn: false,
        }
    }
}

impl McmcConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        Self { iterations, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.burn_in.is_some_and(|b| b >= self.iterations) {
            return Err(Error::invalid("burn-in must be shorter than the run"));
        }
        if self.adapt_window == 0 {
            return Err(Error::invalid("adaptation window must be at least 1"));
        }
        if let Some(s) = self.fixed_sigma_y2 {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("fixed σ_y² must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.iterations / 5)
    }
}

/// Numerical events met while sampling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Factorisations that needed diagonal jitter.
    pub jitter_events: u64,
    /// Proposals rejected because they were numerically singular.
    pub singular_proposals: u64,
    /// Clamped `b_n` values in the summary-statistics baseline.
    pub bn_clamps: u64,
}

/// Samples of one MCMC run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub theta: Vec<DVector<f64>>,
    pub sigma_y2: Vec<f64>,
    pub sigma_x: Option<Vec<SymMatrix>>,
    pub burn_in: usize,
    pub s_acceptance: Option<f64>,
    pub sigma_y2_acceptance: Option<f64>,
    pub diagnostics: Diagnostics,
    /// Mean wall time per iteration, in seconds.
    pub seconds_per_iter: f64,
}

/// JSON summary of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub iterations: usize,
    pub burn_in: usize,
    pub theta_mean: Vec<f64>,
    pub theta_cov: Vec<Vec<f64>>,
    pub sigma_y2_mean: f64,
    pub s_acceptance: Option<f64>,
    pub sigma_y2_acceptance: Option<f64>,
    pub diagnostics: Diagnostics,
    pub seconds_per_iter: f64,
}

impl Trace {
    pub fn with_capacity(iterations: usize, burn_in: usize, record_sigma_x: bool) -> Self {
        Self {
            theta: Vec::with_capacity(iterations),
            sigma_y2: Vec::with_capacity(iterations),
            sigma_x: record_sigma_x.then(|| Vec::with_capacity(iterations)),
            burn_in,
            s_acceptance: None,
            sigma_y2_acceptance: None,
            diagnostics: Diagnostics::default(),
            seconds_per_iter: 0.0,
        }
    }

    pub fn push(&mut self, state: &ChainState) {
        self.theta.push(state.theta.clone());
        self.sigma_y2.push(state.sigma_y2);
        if let Some(v) = self.sigma_x.as_mut() {
            v.push(state.sigma_x.as_sym().clone());
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.theta.first().map_or(0, |t| t.len())
    }

    /// `θ` draws after burn-in.
    pub fn kept(&self) -> &[DVector<f64>] {
        &self.theta[self.burn_in.min(self.theta.len())..]
    }

    /// Every `stride`-th post-burn-in `θ` draw.
    pub fn thinned(&self, stride: usize) -> Vec<DVector<f64>> {
        thin(self.kept(), stride)
    }

    pub fn posterior_mean(&self) -> DVector<f64> {
        sample_mean(self.kept())
    }

    pub fn posterior_cov(&self) -> DMatrix<f64> {
        sample_cov(self.kept())
    }

    pub fn sigma_y2_mean(&self) -> f64 {
        let kept = &self.sigma_y2[self.burn_in.min(self.sigma_y2.len())..];
        kept.iter().sum::<f64>() / kept.len().max(1) as f64
    }

    /// Batch-means Monte Carlo standard error of each coordinate of the posterior mean.
    pub fn mean_mcse(&self) -> DVector<f64> {
        let kept = self.kept();
        DVector::from_fn(self.dim(), |k, _| {
            let series: Vec<f64> = kept.iter().map(|t| t[k]).collect();
            batch_means_se(&series)
        })
    }

    pub fn summary(&self) -> TraceSummary {
        let cov = self.posterior_cov();
        TraceSummary {
            iterations: self.len(),
            burn_in: self.burn_in,
            theta_mean: self.posterior_mean().iter().copied().collect(),
            theta_cov: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
            sigma_y2_mean: self.sigma_y2_mean(),
            s_acceptance: self.s_acceptance,
            sigma_y2_acceptance: self.sigma_y2_acceptance,
            diagnostics: self.diagnostics,
            seconds_per_iter: self.seconds_per_iter,
        }
    }

    /// One CSV row per iteration: `iteration, theta_1..theta_d, sigma_y2`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["iteration".to_string()];
        header.extend((1..=self.dim()).map(|k| format!("theta_{k}")));
        header.push("sigma_y2".into());
        w.write_record(&header)?;
        for (i, (t, s)) in self.theta.iter().zip(&self.sigma_y2).enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(t.iter().map(|v| v.to_string()));
            row.push(s.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Every `stride`-th element, starting with the first.
pub fn thin<T: Clone>(samples: &[T], stride: usize) -> Vec<T> {
    samples.iter().step_by(stride.max(1)).cloned().collect()
}

pub fn sample_mean(samples: &[DVector<f64>]) -> DVector<f64> {
    let d = samples.first().map_or(0, |s| s.len());
    let mut acc = DVector::zeros(d);
    for s in samples {
        acc += s;
    }
    acc / samples.len().max(1) as f64
}

/// Sample covariance with denominator `k − 1`.
pub fn sample_cov(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let d = samples.first().map_or(0, |s| s.len());
    let mean = sample_mean(samples);
    let mut acc = DMatrix::zeros(d, d);
    for s in samples {
        let r = s - &mean;
        acc += &r * r.transpose();
    }
    acc / (samples.len().max(2) - 1) as f64
}

/// Standard error of the mean of an autocorrelated series by
/// non-overlapping batch means with `⌊√k⌋` batches.
pub fn batch_means_se(series: &[f64]) -> f64 {
    let k = series.len();
    if k < 4 {
        return f64::NAN;
    }
    let batches = (k as f64).sqrt().floor() as usize;
    let size = k / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| series[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_means_iid_matches_classical_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..40_000).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let se = batch_means_se(&xs);
        let classical = 1.0 / (xs.len() as f64).sqrt();
        assert!((se / classical - 1.0).abs() < 0.2, "{se} vs {classical}");
    }

    #[test]
    fn thinning_keeps_first() {
        assert_eq!(thin(&[1, 2, 3, 4, 5], 2), vec![1, 3, 5]);
        assert_eq!(thin(&[1, 2], 50), vec![1]);
    }

    #[test]
    fn config_validation() {
        assert!(McmcConfig::with_iterations(0).validate().is_err());
        let c = McmcConfig { burn_in: Some(10), ..McmcConfig::with_iterations(10) };
        assert!(c.validate().is_err());
        assert_eq!(McmcConfig::with_iterations(100).burn_in(), 20);
    }

    #[test]
    fn adapt_state_bounds() {
        assert!(AdaptState::new(2, 3.0, 0.1).is_err());
        assert!(AdaptState::new(2, 4.0, 0.0).is_err());
        assert!(AdaptState::new(2, 4.0, 0.1).is_ok());
    }

    #[test]
    fn trace_csv_shape() {
        let mut t = Trace::with_capacity(2, 0, false);
        t.theta = vec![DVector::from_vec(vec![1.0, 2.0]); 2];
        t.sigma_y2 = vec![0.5; 2];
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "iteration,theta_1,theta_2,sigma_y2");
        assert_eq!(text.lines().count(), 3);
    }
}

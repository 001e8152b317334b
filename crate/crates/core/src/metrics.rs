//! Scores for fitted models: estimation and prediction error, the
//! non-private reference posterior, and kernel MMD between sample sets.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::sample_mvn;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, PsdMatrix, SymMatrix};
use crate::model::{Priors, SummaryStats};
use crate::samplers::{PosteriorGaussian, Trace};

/// Every 50th post-burn-in draw is kept for MMD.
pub const MMD_THINNING: usize = 50;

/// Scores of one method on one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub nodes: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub repeat: usize,
    pub seed: u64,
    /// Absent for real data, where the true `θ` is unknown.
    pub mse_estimation: Option<f64>,
    pub mse_prediction: f64,
    pub mmd2: Option<f64>,
    pub runtime_per_iter: f64,
}

fn mean_sq_diff<'a>(a: impl ExactSizeIterator<Item = &'a f64>, b: impl ExactSizeIterator<Item = &'a f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::invalid("cannot score empty vectors"));
    }
    Ok(a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64)
}

/// Mean of the squared coordinate errors of `θ̂`.
pub fn mse_estimation(theta_hat: &DVector<f64>, theta_true: &DVector<f64>) -> Result<f64> {
    mean_sq_diff(theta_hat.iter(), theta_true.iter())
}

/// Mean squared prediction error on a test set.
pub fn mse_prediction(predictions: &DVector<f64>, y_test: &DVector<f64>) -> Result<f64> {
    mean_sq_diff(predictions.iter(), y_test.iter())
}

/// Anything a prediction can be made from.
#[derive(Debug, Clone, Copy)]
pub enum Fitted<'a> {
    Gaussian(&'a PosteriorGaussian),
    Trace(&'a Trace),
    Point(&'a DVector<f64>),
}

impl Fitted<'_> {
    /// Posterior mean of `θ`, or the point estimate itself.
    pub fn theta_hat(&self) -> DVector<f64> {
        match self {
            Fitted::Gaussian(p) => p.mean.clone(),
            Fitted::Trace(t) => t.posterior_mean(),
            Fitted::Point(v) => (*v).clone(),
        }
    }
}

/// Posterior predictive expectation `x_testᵀ E[θ]` for every test row.
pub fn predict(fitted: Fitted<'_>, x_test: &DMatrix<f64>) -> Result<DVector<f64>> {
    let theta = fitted.theta_hat();
    if x_test.ncols() != theta.len() {
        return Err(Error::dims(format!("test rows have {} features but θ has {}", x_test.ncols(), theta.len())));
    }
    Ok(x_test * theta)
}

/// Conjugate posterior of `θ` from exact statistics with `σ_y²` known:
/// `Σ⁻¹ = S/σ_y² + C⁻¹`, `m = Σ(z/σ_y² + C⁻¹m₀)`.
pub fn nonprivate_posterior(stats: &SummaryStats, sigma_y2: f64, priors: &Priors) -> Result<PosteriorGaussian> {
    let d = priors.dim();
    if stats.dim() != d {
        return Err(Error::dims(format!("statistics have dimension {} but priors have {d}", stats.dim())));
    }
    if !(sigma_y2 > 0.0) {
        return Err(Error::invalid("σ_y² must be positive"));
    }
    let c_inv = priors.c_inv();
    let precision = stats.s.as_matrix() / sigma_y2 + &c_inv;
    let rhs = &stats.z / sigma_y2 + &c_inv * &priors.m;
    let (ch, _) = cholesky_jittered(&SymMatrix::symmetrize(&precision)?.into_matrix())?;
    let mean = ch.solve(&rhs);
    let cov = PsdMatrix::new(SymMatrix::symmetrize(&ch.inverse())?)?;
    Ok(PosteriorGaussian { mean, cov })
}

/// `k` independent draws from a Gaussian posterior.
pub fn sample_posterior<R: Rng + ?Sized>(post: &PosteriorGaussian, k: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..k).map(|_| sample_mvn(&post.mean, post.cov.as_sym(), rng)).collect()
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled samples.
pub fn median_heuristic(p: &[DVector<f64>], q: &[DVector<f64>]) -> f64 {
    let pooled: Vec<&DVector<f64>> = p.iter().chain(q).collect();
    let mut dists = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for k in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[k]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len() / 2;
    let med = if dists.len() % 2 == 0 { 0.5 * (dists[m - 1] + dists[m]) } else { dists[m] };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Unbiased U-statistic estimate of MMD² with the Gaussian kernel
/// `k(x, y) = exp(−‖x − y‖² / (2h²))`.
pub fn mmd2_unbiased(p: &[DVector<f64>], q: &[DVector<f64>], bandwidth: f64) -> Result<f64> {
    if p.len() < 2 || q.len() < 2 {
        return Err(Error::invalid("MMD needs at least two samples from each distribution"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let d = p[0].len();
    if p.iter().chain(q).any(|v| v.len() != d) {
        return Err(Error::dims("MMD samples differ in dimension"));
    }
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |a: &DVector<f64>, b: &DVector<f64>| (-g * sq_dist(a, b)).exp();
    let within = |s: &[DVector<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += k(&s[i], &s[j]);
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in p {
        for b in q {
            cross += k(a, b);
        }
    }
    cross /= (p.len() * q.len()) as f64;
    Ok(within(p) + within(q) - 2.0 * cross)
}

/// MMD² with the median-heuristic bandwidth.
pub fn mmd2_median(p: &[DVector<f64>], q: &[DVector<f64>]) -> Result<f64> {
    mmd2_unbiased(p, q, median_heuristic(p, q))
}

/// Two-sided 90% normal quantile.
pub const CI_Z90: f64 = 1.6449;

/// Mean with a 90% normal-approximation interval `mean ± 1.6449·sd/√k`.
/// With a single value the interval collapses onto it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl MeanCi {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let k = values.len();
        if k == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / k as f64;
        let half = if k > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
            CI_Z90 * var.sqrt() / (k as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, lo: mean - half, hi: mean + half })
    }
}

/// Aggregate over repeats of one `(dataset, J, ε, method)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub nodes: usize,
    pub epsilon: f64,
    pub method: String,
    pub runs: usize,
    pub mse_prediction: MeanCi,
    pub mse_estimation: Option<MeanCi>,
    pub mmd2: Option<MeanCi>,
    pub runtime_per_iter: f64,
}

/// Groups reports by `(dataset, J, ε, method)` in sorted order.
pub fn summarize_reports(reports: &[EvalReport]) -> Vec<SummaryRow> {
    let mut groups: Vec<(&EvalReport, Vec<&EvalReport>)> = Vec::new();
    let key = |r: &EvalReport| (r.dataset.clone(), r.nodes, r.epsilon.to_bits(), r.method.clone());
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        (a.dataset.as_str(), a.nodes)
            .cmp(&(b.dataset.as_str(), b.nodes))
            .then(a.epsilon.total_cmp(&b.epsilon))
            .then(a.method.cmp(&b.method))
    });
    for r in sorted {
        match groups.last_mut() {
            Some((head, members)) if key(head) == key(r) => members.push(r),
            _ => groups.push((r, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(head, members)| {
            let collect = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Vec<f64> { members.iter().filter_map(|r| f(r)).collect() };
            let pred = collect(&|r| Some(r.mse_prediction));
            SummaryRow {
                dataset: head.dataset.clone(),
                nodes: head.nodes,
                epsilon: head.epsilon,
                method: head.method.clone(),
                runs: members.len(),
                mse_prediction: MeanCi::from_values(&pred).expect("groups are non-empty"),
                mse_estimation: MeanCi::from_values(&collect(&|r| r.mse_estimation)),
                mmd2: MeanCi::from_values(&collect(&|r| r.mmd2)),
                runtime_per_iter: collect(&|r| Some(r.runtime_per_iter)).iter().sum::<f64>() / members.len() as f64,
            }
        })
        .collect()
}

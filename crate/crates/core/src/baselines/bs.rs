//! Summary-statistics MCMC with a normal approximation to the per-node
//! statistics `ss = [vec(S), z, u]`, extended to several nodes.
//!
//! Each iteration draws every node's exact `ss_j` from its Gaussian
//! conditional given the noisy release, then `Σ_x` from its inverse-Wishart
//! conditional and `(θ, σ_y²)` from the normal-inverse-gamma posterior.
//! The `D × D` moment matrices with `D = d² + d + 1` make one iteration
//! cost `O(d⁶)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dist::{sample_inv_gamma, sample_inv_wishart, standard_normal_vector};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, nearest_psd, PsdMatrix, SymMatrix};
use crate::model::Priors;
use crate::privacy::NoisyStats;
use crate::samplers::{ChainState, Diagnostics, McmcConfig, Trace};

/// A node's noisy `(S, z, u)` released with a single noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedNoisyStats {
    pub s_hat: SymMatrix,
    pub z_hat: DVector<f64>,
    pub u_hat: f64,
    pub n_rows: usize,
    pub sigma_dp: f64,
}

impl ExtendedNoisyStats {
    pub fn dim(&self) -> usize {
        self.z_hat.len()
    }

    /// The observed vector `[vec(Ŝ), ẑ, û]`, with `vec` in row-major order.
    pub fn ss_vector(&self) -> DVector<f64> {
        let d = self.dim();
        let mut v = DVector::zeros(ss_dim(d));
        for a in 0..d {
            for b in 0..d {
                v[a * d + b] = self.s_hat.get(a, b);
            }
        }
        v.rows_mut(d * d, d).copy_from(&self.z_hat);
        v[d * d + d] = self.u_hat;
        v
    }
}

impl TryFrom<&NoisyStats> for ExtendedNoisyStats {
    type Error = Error;

    fn try_from(n: &NoisyStats) -> Result<Self> {
        let u_hat = n.u_hat.ok_or_else(|| Error::invalid("release has no noisy yᵀy"))?;
        if !n.calibration.covers_u {
            return Err(Error::invalid("release was not calibrated for (S, z, u)"));
        }
        if n.calibration.sigma_s != n.calibration.sigma_z {
            return Err(Error::invalid("extended release needs one noise scale for every component"));
        }
        Ok(Self { s_hat: n.s_hat.clone(), z_hat: n.z_hat.clone(), u_hat, n_rows: n.n_rows, sigma_dp: n.calibration.sigma_s })
    }
}

/// `D = d² + d + 1`.
pub fn ss_dim(d: usize) -> usize {
    d * d + d + 1
}

/// Index pairs `(p, q)` into `w = (x, y)` whose product gives each `ss` entry.
fn ss_index_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(ss_dim(d));
    for a in 0..d {
        for b in 0..d {
            pairs.push((a, b));
        }
    }
    for a in 0..d {
        pairs.push((a, d));
    }
    pairs.push((d, d));
    pairs
}

/// Exact mean and covariance of one row's `ss = [vec(xxᵀ), x y, y²]` for
/// `x ~ N(0, Σ_x)` and `y = xᵀθ + e`, `e ~ N(0, σ_y²)`. With `w = (x, y)`
/// of covariance `Γ`, Isserlis' theorem gives
/// `E[w_p w_q] = Γ_pq` and `Cov(w_p w_q, w_r w_t) = Γ_pr Γ_qt + Γ_pt Γ_qr`.
pub fn bs_ss_moments(theta: &DVector<f64>, sigma_y2: f64, sigma_x: &PsdMatrix) -> Result<(DVector<f64>, SymMatrix)> {
    let d = theta.len();
    if sigma_x.dim() != d {
        return Err(Error::dims("θ and Σ_x differ in dimension"));
    }
    let sx = sigma_x.as_matrix();
    let sxt = sx * theta;
    let mut gamma = DMatrix::zeros(d + 1, d + 1);
    gamma.view_mut((0, 0), (d, d)).copy_from(sx);
    for a in 0..d {
        gamma[(a, d)] = sxt[a];
        gamma[(d, a)] = sxt[a];
    }
    gamma[(d, d)] = theta.dot(&sxt) + sigma_y2;

    let pairs = ss_index_pairs(d);
    let big_d = pairs.len();
    let mean = DVector::from_iterator(big_d, pairs.iter().map(|&(p, q)| gamma[(p, q)]));
    let mut cov = DMatrix::zeros(big_d, big_d);
    for (i, &(p, q)) in pairs.iter().enumerate() {
        for (k, &(r, t)) in pairs.iter().enumerate().skip(i) {
            let c = gamma[(p, r)] * gamma[(q, t)] + gamma[(p, t)] * gamma[(q, r)];
            cov[(i, k)] = c;
            cov[(k, i)] = c;
        }
    }
    Ok((mean, SymMatrix::from_upper(&cov)?))
}

/// Draws `ss_j` from `N(μ_post, Σ_post)` where the prior is
/// `N(n_j μ_prior, n_j Σ_prior)` and the release adds `N(0, σ_dp² I)`.
///
/// The moments are computed through the eigendecomposition of `Σ_prior`,
/// which is singular because `vec(S)` repeats off-diagonal entries:
/// with `n_j Σ_prior = Q diag(λ) Qᵀ` and `s = σ_dp²`, the gain is
/// `Q diag(λ/(λ+s)) Qᵀ` and the covariance `Q diag(λs/(λ+s)) Qᵀ`.
pub fn bs_conditional_ss<R: Rng + ?Sized>(
    prior_mean: &DVector<f64>,
    prior_cov: &SymMatrix,
    node: &ExtendedNoisyStats,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let (mu, q, var) = bs_conditional_moments(prior_mean, prior_cov, node)?;
    let xi = standard_normal_vector(mu.len(), rng);
    let scaled = DVector::from_iterator(var.len(), var.iter().zip(xi.iter()).map(|(v, x)| v.sqrt() * x));
    Ok(mu + q * scaled)
}

/// Mean, eigenvectors and eigenvalues of the conditional covariance.
pub(crate) fn bs_conditional_moments(
    prior_mean: &DVector<f64>,
    prior_cov: &SymMatrix,
    node: &ExtendedNoisyStats,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let big_d = ss_dim(node.dim());
    if prior_mean.len() != big_d || prior_cov.dim() != big_d {
        return Err(Error::dims(format!("ss moments have dimension {} but the node needs {big_d}", prior_mean.len())));
    }
    if !(node.sigma_dp >= 0.0) {
        return Err(Error::invalid("σ_dp must be non-negative"));
    }
    let nj = node.n_rows as f64;
    let m0 = prior_mean * nj;
    let eig = prior_cov.scale(nj).eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let lam = eig.eigenvalues.map(|v| if v <= 1e-12 * max { 0.0 } else { v });
    let s = node.sigma_dp * node.sigma_dp;
    let q = eig.eigenvectors;
    let resid = node.ss_vector() - &m0;
    let proj = q.tr_mul(&resid);
    let gain = DVector::from_iterator(big_d, lam.iter().map(|&l| if l + s > 0.0 { l / (l + s) } else { 0.0 }));
    let mu = m0 + &q * proj.component_mul(&gain);
    let var = DVector::from_iterator(big_d, lam.iter().map(|&l| if l + s > 0.0 { l * s / (l + s) } else { 0.0 }));
    Ok((mu, q, var))
}

/// Normal-inverse-gamma prior `σ² ~ IG(a₀, b₀)`, `θ | σ² ~ N(μ₀, σ² Λ₀⁻¹)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NigPrior {
    pub a0: f64,
    pub b0: f64,
    pub mu0: DVector<f64>,
    pub lambda0: PsdMatrix,
}

impl NigPrior {
    /// Matches `θ ~ N(m, C)` at the prior mean of `σ_y²`:
    /// `Λ₀ = (b/(a−1)) C⁻¹`.
    pub fn from_priors(p: &Priors) -> Result<Self> {
        let scale = p.sigma_y2_mean();
        let lambda0 = PsdMatrix::new(SymMatrix::symmetrize(&(p.c_inv() * scale))?)?;
        Ok(Self { a0: p.a, b0: p.b, mu0: p.m.clone(), lambda0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NigPosterior {
    pub a_n: f64,
    pub b_n: f64,
    pub mu_n: DVector<f64>,
    pub lambda_n: PsdMatrix,
    /// `b_n` came out non-positive and was clamped.
    pub clamped: bool,
}

const BN_FLOOR: f64 = 1e-8;

/// Conjugate update from aggregate statistics:
/// `Λ_n = S + Λ₀`, `μ_n = Λ_n⁻¹(z + Λ₀μ₀)`, `a_n = a₀ + n/2`,
/// `b_n = b₀ + (u + μ₀ᵀΛ₀μ₀ − μ_nᵀΛ_nμ_n)/2`. With `literal` the variant
/// `b_n = u/2 + μ₀ᵀΛ₀μ₀ − μ_nᵀΛ_nμ_n` is used instead.
pub fn bs_nig_update(agg_s: &SymMatrix, agg_z: &DVector<f64>, agg_u: f64, n: usize, prior: &NigPrior, literal: bool) -> Result<NigPosterior> {
    let d = prior.mu0.len();
    if agg_s.dim() != d || agg_z.len() != d {
        return Err(Error::dims("aggregate statistics and NIG prior differ in dimension"));
    }
    let l0 = prior.lambda0.as_matrix();
    let lambda_n = SymMatrix::symmetrize(&(agg_s.as_matrix() + l0))?;
    let (ch, _) = cholesky_jittered(lambda_n.as_matrix())?;
    let mu_n = ch.solve(&(agg_z + l0 * &prior.mu0));
    let q0 = prior.mu0.dot(&(l0 * &prior.mu0));
    let qn = mu_n.dot(&(lambda_n.as_matrix() * &mu_n));
    let raw = if literal { 0.5 * agg_u + q0 - qn } else { prior.b0 + 0.5 * (agg_u + q0 - qn) };
    let clamped = !(raw > 0.0);
    let b_n = if clamped { BN_FLOOR } else { raw };
    Ok(NigPosterior {
        a_n: prior.a0 + n as f64 / 2.0,
        b_n,
        mu_n,
        lambda_n: PsdMatrix::new_unchecked(lambda_n),
        clamped,
    })
}

/// Splits a drawn `ss` into a symmetrised `S`, `z` and `u`.
fn unpack(ss: &DVector<f64>, d: usize) -> Result<(SymMatrix, DVector<f64>, f64)> {
    let s = DMatrix::from_fn(d, d, |a, b| ss[a * d + b]);
    Ok((SymMatrix::symmetrize(&s)?, ss.rows(d * d, d).into_owned(), ss[d * d + d]))
}

/// One sweep of the summary-statistics sampler.
fn bs_step<R: Rng + ?Sized>(
    state: &mut ChainState,
    nodes: &[ExtendedNoisyStats],
    priors: &Priors,
    nig: &NigPrior,
    literal: bool,
    rng: &mut R,
    diag: &mut Diagnostics,
) -> Result<()> {
    let d = priors.dim();
    let (mean, cov) = bs_ss_moments(&state.theta, state.sigma_y2, &state.sigma_x)?;
    let mut agg_s = DMatrix::zeros(d, d);
    let mut agg_z = DVector::zeros(d);
    let mut agg_u = 0.0;
    let mut psd_list = Vec::with_capacity(nodes.len());
    for node in nodes {
        let ss = bs_conditional_ss(&mean, &cov, node, rng)?;
        let (s, z, u) = unpack(&ss, d)?;
        let s = nearest_psd(&s)?;
        agg_s += s.as_matrix();
        agg_z += z;
        agg_u += u;
        psd_list.push(s);
    }
    let n_total: usize = nodes.iter().map(|n| n.n_rows).sum();

    let scale = priors.lambda.as_matrix() + &agg_s;
    state.sigma_x = PsdMatrix::new_unchecked(sample_inv_wishart(&scale, priors.kappa + n_total as f64, rng)?);

    let post = bs_nig_update(&SymMatrix::symmetrize(&agg_s)?, &agg_z, agg_u, n_total, nig, literal)?;
    diag.bn_clamps += u64::from(post.clamped);
    state.sigma_y2 = sample_inv_gamma(post.a_n, post.b_n, rng);
    let (ch, jit) = cholesky_jittered(post.lambda_n.as_matrix())?;
    diag.jitter_events += u64::from(jit);
    // θ = μ_n + σ L⁻ᵀ ξ has covariance σ² Λ_n⁻¹.
    let xi = standard_normal_vector(d, rng) * state.sigma_y2.sqrt();
    let offset = ch.l().transpose().solve_upper_triangular(&xi).ok_or_else(|| Error::numerical("Λ_n factor is singular"))?;
    state.theta = post.mu_n + offset;
    state.s_list = psd_list;
    Ok(())
}

/// Runs the summary-statistics sampler over every node's extended release.
pub fn run_mcmc_bs<R: Rng + ?Sized>(
    nodes: &[ExtendedNoisyStats],
    priors: &Priors,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<Trace> {
    config.validate()?;
    priors.validate()?;
    if nodes.is_empty() {
        return Err(Error::invalid("at least one node is required"));
    }
    let d = priors.dim();
    if let Some(j) = nodes.iter().position(|n| n.dim() != d) {
        return Err(Error::dims(format!("node {j} has dimension {} but priors have {d}", nodes[j].dim())));
    }
    let nig = NigPrior::from_priors(priors)?;
    let sigma_x = if priors.kappa > d as f64 + 1.0 {
        priors.lambda.scale(1.0 / (priors.kappa - d as f64 - 1.0))?
    } else {
        priors.lambda.clone()
    };
    let mut state = ChainState {
        theta: priors.m.clone(),
        sigma_y2: priors.sigma_y2_mean(),
        sigma_x,
        s_list: Vec::new(),
        adapt: crate::samplers::AdaptState::new(d, d as f64 + 2.0, 1.0)?,
    };
    let burn_in = config.burn_in();
    let mut trace = Trace::with_capacity(config.iterations, burn_in, config.record_sigma_x);
    let mut diag = Diagnostics::default();
    let start = Instant::now();
    for _ in 0..config.iterations {
        bs_step(&mut state, nodes, priors, &nig, config.literal_bn, rng, &mut diag)?;
        trace.push(&state);
    }
    trace.seconds_per_iter = start.elapsed().as_secs_f64() / config.iterations as f64;
    trace.diagnostics = diag;
    Ok(trace)
}

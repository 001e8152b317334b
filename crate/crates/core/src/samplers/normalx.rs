//! MCMC over `(Σ_x, S_1:J, θ, σ_y²)` for normally distributed features.

use std::time::Instant;

use rand::Rng;

use super::conditionals::{sigma_x_conditional, theta_posterior, NodeTerm};
use super::moves::{mh_update_s, mh_update_sigma_y};
use super::{AdaptState, ChainState, Diagnostics, McmcConfig, Trace};
use crate::dist::{sample_inv_wishart, sample_mvn, DistSpec};
use crate::error::{Error, Result};
use crate::linalg::{floor_eigenvalues, nearest_psd, PsdMatrix};
use crate::model::Priors;
use crate::privacy::NoisyStats;

/// Checks that every node matches the prior dimension.
pub(crate) fn check_nodes(nodes: &[NoisyStats], priors: &Priors) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::invalid("at least one node is required"));
    }
    priors.validate()?;
    let d = priors.dim();
    for (j, n) in nodes.iter().enumerate() {
        if n.dim() != d || n.s_hat.dim() != d {
            return Err(Error::dims(format!("node {j} has dimension {} but priors have {d}", n.dim())));
        }
    }
    Ok(())
}

/// Strictly positive definite starting value for `S_j`: the nearest PSD
/// matrix to `Ŝ_j` with eigenvalues raised to `1e-8 · trace / d`.
pub(crate) fn initial_s(node: &NoisyStats) -> Result<PsdMatrix> {
    let psd = nearest_psd(&node.s_hat)?;
    let d = psd.dim() as f64;
    let scale = psd.as_sym().trace() / d;
    let floor = 1e-8 * if scale > 0.0 { scale } else { 1.0 };
    floor_eigenvalues(psd.as_sym(), floor)
}

/// Prior-centred `Σ_x`: `Λ/(κ − d − 1)` when that mean exists, else `Λ`.
pub(crate) fn initial_sigma_x(priors: &Priors) -> Result<PsdMatrix> {
    let d = priors.dim() as f64;
    if priors.kappa > d + 1.0 {
        priors.lambda.scale(1.0 / (priors.kappa - d - 1.0))
    } else {
        Ok(priors.lambda.clone())
    }
}

/// The MCMC-normalX transition kernel bound to one set of node releases.
pub struct NormalXSampler<'a> {
    nodes: &'a [NoisyStats],
    priors: &'a Priors,
    config: &'a McmcConfig,
    n_total: usize,
    update_s: bool,
}

impl<'a> NormalXSampler<'a> {
    pub fn new(nodes: &'a [NoisyStats], priors: &'a Priors, config: &'a McmcConfig) -> Result<Self> {
        config.validate()?;
        check_nodes(nodes, priors)?;
        let d = priors.dim();
        if let Some(j) = nodes.iter().position(|n| n.n_rows < d) {
            return Err(Error::invalid(format!(
                "node {j} has {} rows; the Wishart prior on S_j needs at least d = {d}",
                nodes[j].n_rows
            )));
        }
        let n_total = nodes.iter().map(|n| n.n_rows).sum();
        // With exact Gram matrices there is nothing to sample.
        let update_s = nodes.iter().any(|n| n.calibration.sigma_s > 0.0);
        Ok(Self { nodes, priors, config, n_total, update_s })
    }

    pub fn initial_state(&self) -> Result<ChainState> {
        let d = self.priors.dim();
        let s_list = self.nodes.iter().map(initial_s).collect::<Result<Vec<_>>>()?;
        let sigma_y2 = self.config.fixed_sigma_y2.unwrap_or_else(|| self.priors.sigma_y2_mean());
        let mean_n = self.n_total as f64 / self.nodes.len() as f64;
        let alpha = self.config.initial_alpha.unwrap_or((10.0 * (d as f64 + 2.0)).max(mean_n));
        let sigma_q = self.config.initial_sigma_q.unwrap_or(0.25 * sigma_y2);
        Ok(ChainState {
            theta: self.priors.m.clone(),
            sigma_y2,
            sigma_x: initial_sigma_x(self.priors)?,
            s_list,
            adapt: AdaptState::new(d, alpha, sigma_q)?,
        })
    }

    /// One sweep: `Σ_x`, then each `S_j`, then `θ`, then `σ_y²`.
    pub fn step<R: Rng + ?Sized>(&self, state: &mut ChainState, rng: &mut R, diag: &mut Diagnostics) -> Result<()> {
        let spec = sigma_x_conditional(&state.s_list, self.n_total, self.priors)?;
        let DistSpec::InvWishart { scale, dof } = spec else {
            unreachable!("Σ_x conditional is inverse Wishart")
        };
        state.sigma_x = PsdMatrix::new_unchecked(sample_inv_wishart(scale.as_matrix(), dof, rng)?);

        if self.update_s {
            for (j, node) in self.nodes.iter().enumerate() {
                let (s, outcome) = mh_update_s(state, j, node, self.config.s_prior, self.priors, rng)?;
                state.s_list[j] = s;
                state.adapt.record_s(outcome.accepted);
                diag.singular_proposals += u64::from(outcome.singular);
                diag.jitter_events += outcome.jitter;
            }
        }

        sample_theta(state, self.nodes, self.priors, rng, diag)?;

        if self.config.fixed_sigma_y2.is_none() {
            let (v, outcome) = mh_update_sigma_y(state, self.nodes, self.priors, rng)?;
            state.sigma_y2 = v;
            state.adapt.record_sigma_y2(outcome.accepted);
            diag.jitter_events += outcome.jitter;
        }
        Ok(())
    }
}

pub(crate) fn sample_theta<R: Rng + ?Sized>(
    state: &mut ChainState,
    nodes: &[NoisyStats],
    priors: &Priors,
    rng: &mut R,
    diag: &mut Diagnostics,
) -> Result<()> {
    let terms = state.s_list.iter().zip(nodes).map(|(s, n)| NodeTerm {
        s: s.as_matrix(),
        z_hat: &n.z_hat,
        sigma_z2: n.calibration.sigma_z2(),
    });
    let (post, jitter) = theta_posterior(terms, state.sigma_y2, priors)?;
    diag.jitter_events += jitter;
    state.theta = sample_mvn(&post.mean, post.cov.as_sym(), rng);
    Ok(())
}

/// Drives a kernel for `config.iterations` sweeps, adapting proposals in
/// windows during burn-in and recording every state.
pub(crate) fn run_chain<R, F>(config: &McmcConfig, mut state: ChainState, rng: &mut R, mut step: F) -> Result<Trace>
where
    R: Rng + ?Sized,
    F: FnMut(&mut ChainState, &mut R, &mut Diagnostics) -> Result<()>,
{
    let burn_in = config.burn_in();
    let mut trace = Trace::with_capacity(config.iterations, burn_in, config.record_sigma_x);
    let mut diag = Diagnostics::default();
    let start = Instant::now();
    for it in 0..config.iterations {
        step(&mut state, rng, &mut diag)?;
        if config.adapt && it < burn_in && (it + 1) % config.adapt_window == 0 {
            state.adapt.end_window();
        }
        trace.push(&state);
    }
    trace.seconds_per_iter = start.elapsed().as_secs_f64() / config.iterations as f64;
    trace.s_acceptance = state.adapt.s_moves.rate();
    trace.sigma_y2_acceptance = state.adapt.sigma_y2_moves.rate();
    trace.diagnostics = diag;
    Ok(trace)
}

/// MCMC-normalX: each iteration samples `Σ_x` from its inverse-Wishart
/// conditional, updates every `S_j` by a Wishart-proposal MH move, samples
/// `θ` from its Gaussian conditional and updates `σ_y²` by a random walk.
pub fn run_mcmc_normalx<R: Rng + ?Sized>(
    nodes: &[NoisyStats],
    priors: &Priors,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<Trace> {
    let sampler = NormalXSampler::new(nodes, priors, config)?;
    let state = sampler.initial_state()?;
    run_chain(config, state, rng, |st, r, diag| sampler.step(st, r, diag))
}

//! Inference with each `S_j` fixed at an estimate from its noisy release.

use rand::Rng;

use super::conditionals::{theta_posterior, NodeTerm};
use super::moves::mh_update_sigma_y;
use super::normalx::{check_nodes, initial_sigma_x, run_chain, sample_theta};
use super::{AdaptState, ChainState, McmcConfig, PosteriorGaussian, Trace};
use crate::error::{Error, Result};
use crate::linalg::{nearest_psd, PsdMatrix, SymMatrix};
use crate::model::Priors;
use crate::privacy::NoisyStats;

/// Maximum-likelihood estimate of `S` from `Ŝ` over the PSD cone, i.e. the
/// Frobenius-nearest PSD matrix.
pub fn estimate_s(s_hat: &SymMatrix) -> Result<PsdMatrix> {
    nearest_psd(s_hat)
}

/// Crude plug-in value `σ̃_y² = ‖Y‖/3` from the public response bound.
pub fn default_sigma_y2_tilde(y_norm: f64) -> f64 {
    y_norm / 3.0
}

/// MCMC-fixedS: the MCMC-normalX sweep without the `Σ_x` and `S_j`
/// updates, using `S̃_j = estimate_s(Ŝ_j)` throughout.
pub fn run_mcmc_fixeds<R: Rng + ?Sized>(
    nodes: &[NoisyStats],
    priors: &Priors,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<Trace> {
    config.validate()?;
    check_nodes(nodes, priors)?;
    let d = priors.dim();
    let s_list = nodes.iter().map(|n| estimate_s(&n.s_hat)).collect::<Result<Vec<_>>>()?;
    let sigma_y2 = config.fixed_sigma_y2.unwrap_or_else(|| priors.sigma_y2_mean());
    let sigma_q = config.initial_sigma_q.unwrap_or(0.25 * sigma_y2);
    let state = ChainState {
        theta: priors.m.clone(),
        sigma_y2,
        // Unused by this sampler; kept so the state type is shared.
        sigma_x: initial_sigma_x(priors)?,
        s_list,
        adapt: AdaptState::new(d, d as f64 + 2.0, sigma_q)?,
    };
    let sample_sigma = config.fixed_sigma_y2.is_none();
    run_chain(config, state, rng, |st, r, diag| {
        sample_theta(st, nodes, priors, r, diag)?;
        if sample_sigma {
            let (v, outcome) = mh_update_sigma_y(st, nodes, priors, r)?;
            st.sigma_y2 = v;
            st.adapt.record_sigma_y2(outcome.accepted);
            diag.jitter_events += outcome.jitter;
        }
        Ok(())
    })
}

/// Bayes-fixedS-fast: the Gaussian posterior of `θ` given `S_j = S̃_j`,
/// `σ_y² = σ̃_y²` and the noisy `ẑ_j`. With
/// `U_j = S̃_j(σ̃_y²S̃_j + σ_z²I)⁻¹S̃_j` and `u_j = S̃_j(σ̃_y²S̃_j + σ_z²I)⁻¹ẑ_j`,
/// the posterior is `N(Σ(C⁻¹m + Σ_j u_j), Σ)` with `Σ⁻¹ = Σ_j U_j + C⁻¹`.
pub fn bayes_fixeds_fast(nodes: &[NoisyStats], priors: &Priors, sigma_y2_tilde: f64) -> Result<PosteriorGaussian> {
    check_nodes(nodes, priors)?;
    if !(sigma_y2_tilde > 0.0 && sigma_y2_tilde.is_finite()) {
        return Err(Error::invalid(format!("σ̃_y² must be positive, got {sigma_y2_tilde}")));
    }
    let s_list = nodes.iter().map(|n| estimate_s(&n.s_hat)).collect::<Result<Vec<_>>>()?;
    let terms = s_list.iter().zip(nodes).map(|(s, n)| NodeTerm {
        s: s.as_matrix(),
        z_hat: &n.z_hat,
        sigma_z2: n.calibration.sigma_z2(),
    });
    theta_posterior(terms, sigma_y2_tilde, priors).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::NoiseCalibration;
    use crate::samplers::theta_conditional;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn node(s: &[f64], z: &[f64], sigma: f64) -> NoisyStats {
        let d = z.len();
        NoisyStats {
            s_hat: SymMatrix::from_upper(&DMatrix::from_row_slice(d, d, s)).unwrap(),
            z_hat: DVector::from_column_slice(z),
            u_hat: None,
            n_rows: 10,
            calibration: NoiseCalibration::fixed(sigma, false),
        }
    }

    #[test]
    fn fast_equals_theta_conditional() {
        let priors = Priors::experiment_default(PsdMatrix::identity(2));
        let nodes = vec![node(&[5.0, 1.0, 1.0, -0.5], &[1.0, 2.0], 0.7), node(&[3.0, 0.2, 0.2, 4.0], &[-1.0, 0.3], 0.7)];
        let fast = bayes_fixeds_fast(&nodes, &priors, 0.4).unwrap();
        let s: Vec<_> = nodes.iter().map(|n| estimate_s(&n.s_hat).unwrap()).collect();
        let z: Vec<_> = nodes.iter().map(|n| n.z_hat.clone()).collect();
        let cond = theta_conditional(&s, &z, 0.4, 0.49, &priors).unwrap();
        assert!((fast.mean - cond.mean).norm() < 1e-14);
        assert!((fast.cov.as_matrix() - cond.cov.as_matrix()).norm() < 1e-14);
    }

    #[test]
    fn fast_is_order_invariant() {
        let priors = Priors::experiment_default(PsdMatrix::identity(2));
        let a = node(&[5.0, 1.0, 1.0, 2.0], &[1.0, 2.0], 0.3);
        let b = node(&[3.0, 0.2, 0.2, 4.0], &[-1.0, 0.3], 0.3);
        let p = bayes_fixeds_fast(&[a.clone(), b.clone()], &priors, 0.4).unwrap();
        let q = bayes_fixeds_fast(&[b, a], &priors, 0.4).unwrap();
        assert!((p.mean - q.mean).norm() < 1e-14);
    }

    #[test]
    fn fixeds_seed_determinism_and_fixed_sigma() {
        let priors = Priors::experiment_default(PsdMatrix::identity(2));
        let nodes = vec![node(&[5.0, 1.0, 1.0, 2.0], &[1.0, 2.0], 0.3)];
        let config = McmcConfig { fixed_sigma_y2: Some(0.3), ..McmcConfig::with_iterations(100) };
        let a = run_mcmc_fixeds(&nodes, &priors, &config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = run_mcmc_fixeds(&nodes, &priors, &config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.theta, b.theta);
        assert!(a.sigma_y2.iter().all(|&v| v == 0.3));
        assert_eq!(a.sigma_y2_acceptance, None);
    }
}

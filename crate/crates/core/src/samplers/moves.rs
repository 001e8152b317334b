//! Metropolis–Hastings moves for `S_j` and `σ_y²`, and their proposal tuning.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::conditionals::{loglik_zhat_counted, total_loglik, NodeTerm};
use super::{AdaptState, ChainState, SPrior};
use crate::dist::{ln_inv_gamma, ln_wishart, sample_wishart};
use crate::error::{Error, Result};
use crate::linalg::{log_det_from_cholesky, PsdMatrix, SymMatrix};
use crate::model::Priors;
use crate::privacy::NoisyStats;

/// Target acceptance rate for both moves.
pub const TARGET_ACCEPTANCE: f64 = 0.2;

/// What happened in one MH step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MoveOutcome {
    pub accepted: bool,
    /// The proposal was numerically singular and rejected outright.
    pub singular: bool,
    /// Factorisations that needed jitter.
    pub jitter: u64,
}

/// `log q(S | S′) − log q(S′ | S)` for the proposal `S′ ~ W(S/α, α)`:
/// `(α − (d+1)/2)(log|S| − log|S′|) + α(tr(S⁻¹S′) − tr(S′⁻¹S))/2`.
pub fn wishart_proposal_log_ratio(s: &DMatrix<f64>, s_new: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    let (Some(cs), Some(cn)) = (Cholesky::new(s.clone()), Cholesky::new(s_new.clone())) else {
        return Err(Error::numerical("Wishart proposal ratio needs positive definite matrices"));
    };
    Ok(proposal_log_ratio_factored(&cs, s, &cn, s_new, alpha))
}

fn proposal_log_ratio_factored(
    cs: &Cholesky<f64, Dyn>,
    s: &DMatrix<f64>,
    cn: &Cholesky<f64, Dyn>,
    s_new: &DMatrix<f64>,
    alpha: f64,
) -> f64 {
    let d = s.nrows() as f64;
    let tr_fwd = cs.solve(s_new).trace();
    let tr_back = cn.solve(s).trace();
    (alpha - 0.5 * (d + 1.0)) * (log_det_from_cholesky(cs) - log_det_from_cholesky(cn)) + 0.5 * alpha * (tr_fwd - tr_back)
}

/// `log p(Ŝ | S)` up to a constant: independent `N(S_ik, σ_s²)` upper-triangle entries.
fn ln_shat_given_s(s_hat: &SymMatrix, s: &DMatrix<f64>, sigma_s: f64) -> f64 {
    if sigma_s == 0.0 {
        return 0.0;
    }
    let d = s.nrows();
    let mut acc = 0.0;
    for i in 0..d {
        for k in i..d {
            let r = s_hat.get(i, k) - s[(i, k)];
            acc += r * r;
        }
    }
    -0.5 * acc / (sigma_s * sigma_s)
}

fn ln_s_prior(s: &DMatrix<f64>, state: &ChainState, n_rows: usize, prior: SPrior, priors: &Priors) -> f64 {
    match prior {
        SPrior::GramWishart => ln_wishart(s, state.sigma_x.as_matrix(), n_rows as f64),
        SPrior::ScaledKappa => ln_wishart(s, &(state.sigma_x.as_matrix() * n_rows as f64), priors.kappa),
    }
}

fn ln_s_target(
    s: &DMatrix<f64>,
    state: &ChainState,
    node: &NoisyStats,
    prior: SPrior,
    priors: &Priors,
) -> Result<(f64, bool)> {
    let (ll, jitter) = loglik_zhat_counted(&node.z_hat, s, &state.theta, state.sigma_y2, node.calibration.sigma_z2())?;
    let lp = ln_s_prior(s, state, node.n_rows, prior, priors);
    Ok((ll + lp + ln_shat_given_s(&node.s_hat, s, node.calibration.sigma_s), jitter))
}

/// One MH update of `S_j` with proposal `S′ ~ W(S_j/α, α)`, targeting
/// `p(ẑ_j | S_j, θ, σ_y²) p(S_j | Σ_x) p(Ŝ_j | S_j)`.
pub fn mh_update_s<R: Rng + ?Sized>(
    state: &ChainState,
    j: usize,
    node: &NoisyStats,
    prior: SPrior,
    priors: &Priors,
    rng: &mut R,
) -> Result<(PsdMatrix, MoveOutcome)> {
    let current = state
        .s_list
        .get(j)
        .ok_or_else(|| Error::invalid(format!("node index {j} out of range")))?;
    let s = current.as_matrix();
    let alpha = state.adapt.alpha;
    let cs = Cholesky::new(s.clone()).ok_or_else(|| Error::numerical(format!("current S_{j} is not positive definite")))?;
    let mut outcome = MoveOutcome::default();

    let proposal = sample_wishart(&(s / alpha), alpha, rng)?;
    let Some(cn) = Cholesky::new(proposal.as_matrix().clone()) else {
        outcome.singular = true;
        return Ok((current.clone(), outcome));
    };
    let s_new = proposal.as_matrix();
    let (t_new, j1) = ln_s_target(s_new, state, node, prior, priors)?;
    let (t_old, j2) = ln_s_target(s, state, node, prior, priors)?;
    outcome.jitter = u64::from(j1) + u64::from(j2);
    let log_ratio = t_new - t_old + proposal_log_ratio_factored(&cs, s, &cn, s_new, alpha);
    if accept(log_ratio, rng) {
        outcome.accepted = true;
        Ok((PsdMatrix::new_unchecked(proposal), outcome))
    } else {
        Ok((current.clone(), outcome))
    }
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// One random-walk MH update `σ_y²′ ~ N(σ_y², σ_q²)` targeting
/// `IG(σ_y²; a, b) Π_j N(ẑ_j; S_jθ, σ_y²S_j + σ_z²I)`, using the `S_j` in
/// `state`. Non-positive proposals are rejected.
pub fn mh_update_sigma_y<R: Rng + ?Sized>(
    state: &ChainState,
    nodes: &[NoisyStats],
    priors: &Priors,
    rng: &mut R,
) -> Result<(f64, MoveOutcome)> {
    if nodes.len() != state.s_list.len() {
        return Err(Error::dims(format!("{} nodes but {} S matrices", nodes.len(), state.s_list.len())));
    }
    let mut outcome = MoveOutcome::default();
    let current = state.sigma_y2;
    let proposal = current + state.adapt.sigma_q * rng.sample::<f64, _>(StandardNormal);
    if proposal <= 0.0 {
        return Ok((current, outcome));
    }
    let terms = || {
        state.s_list.iter().zip(nodes).map(|(s, n)| NodeTerm {
            s: s.as_matrix(),
            z_hat: &n.z_hat,
            sigma_z2: n.calibration.sigma_z2(),
        })
    };
    let (ll_new, j1) = total_loglik(terms(), &state.theta, proposal)?;
    let (ll_old, j2) = total_loglik(terms(), &state.theta, current)?;
    outcome.jitter = j1 + j2;
    let log_ratio = ll_new - ll_old + ln_inv_gamma(proposal, priors.a, priors.b) - ln_inv_gamma(current, priors.a, priors.b);
    if accept(log_ratio, rng) {
        outcome.accepted = true;
        Ok((proposal, outcome))
    } else {
        Ok((current, outcome))
    }
}

/// One Robbins–Monro step on the log scale with gain `t^{-0.6}`: `α` shrinks
/// (wider proposals) and `σ_q` grows when acceptance exceeds the target.
pub fn adapt_proposals(adapt: &AdaptState, s_rate: Option<f64>, sigma_rate: Option<f64>) -> AdaptState {
    let mut next = adapt.clone();
    next.steps += 1;
    let gain = (next.steps as f64).powf(-0.6);
    if let Some(r) = s_rate.filter(|&r| r != TARGET_ACCEPTANCE) {
        next.alpha = (adapt.alpha.ln() - gain * (r - TARGET_ACCEPTANCE)).exp().max(adapt.alpha_min);
    }
    if let Some(r) = sigma_rate.filter(|&r| r != TARGET_ACCEPTANCE) {
        next.sigma_q = (adapt.sigma_q.ln() + gain * (r - TARGET_ACCEPTANCE)).exp();
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{ln_wishart, sample_inv_gamma};
    use crate::privacy::NoiseCalibration;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spd(d: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(d, d, v)
    }

    #[test]
    fn proposal_ratio_is_zero_at_equality() {
        let s = spd(2, &[3.0, 0.5, 0.5, 2.0]);
        assert_eq!(wishart_proposal_log_ratio(&s, &s, 17.0).unwrap(), 0.0);
    }

    #[test]
    fn proposal_ratio_matches_wishart_densities() {
        let s = spd(2, &[3.0, 0.5, 0.5, 2.0]);
        let t = spd(2, &[2.0, -0.3, -0.3, 4.0]);
        let alpha = 9.5;
        let want = ln_wishart(&s, &(&t / alpha), alpha) - ln_wishart(&t, &(&s / alpha), alpha);
        let got = wishart_proposal_log_ratio(&s, &t, alpha).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn adaptation_fixed_point_and_direction() {
        let a = AdaptState::new(2, 50.0, 0.3).unwrap();
        let same = adapt_proposals(&a, Some(0.2), Some(0.2));
        assert_eq!((same.alpha, same.sigma_q), (a.alpha, a.sigma_q));
        let mut cur = a.clone();
        for _ in 0..200 {
            let next = adapt_proposals(&cur, Some(1.0), Some(1.0));
            assert!(next.alpha <= cur.alpha && next.alpha >= 4.0);
            assert!(next.sigma_q > cur.sigma_q);
            cur = next;
        }
        assert_eq!(cur.alpha, 4.0);
    }

    fn state_1d(s: f64, sigma_y2: f64) -> ChainState {
        ChainState {
            theta: DVector::from_element(1, 0.5),
            sigma_y2,
            sigma_x: PsdMatrix::identity(1),
            s_list: vec![PsdMatrix::from_matrix(&spd(1, &[s])).unwrap()],
            adapt: AdaptState::new(1, 20.0, 0.2).unwrap(),
        }
    }

    #[test]
    fn sigma_move_without_data_targets_prior() {
        // No nodes: the chain should sample IG(a, b).
        let priors = Priors::new(DVector::zeros(1), PsdMatrix::identity(1), 5.0, 4.0, PsdMatrix::identity(1), 2.0).unwrap();
        let mut st = state_1d(1.0, 1.0);
        st.s_list.clear();
        st.adapt.sigma_q = 0.6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut draws = Vec::new();
        for i in 0..60_000 {
            let (v, _) = mh_update_sigma_y(&st, &[], &priors, &mut rng).unwrap();
            st.sigma_y2 = v;
            if i >= 5_000 {
                draws.push(v);
            }
        }
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let se = super::super::batch_means_se(&draws);
        // IG(5, 4) has mean 1.
        assert!((mean - 1.0).abs() < 4.0 * se, "mean {mean}, se {se}");
        let exact: Vec<f64> = (0..20_000).map(|_| sample_inv_gamma(5.0, 4.0, &mut rng)).collect();
        let q = |v: &mut Vec<f64>, p: f64| {
            v.sort_by(f64::total_cmp);
            v[(p * v.len() as f64) as usize]
        };
        let (mut a, mut b) = (draws.clone(), exact);
        assert!((q(&mut a, 0.9) - q(&mut b, 0.9)).abs() < 0.05);
    }

    #[test]
    fn s_move_accepts_almost_always_under_flat_target() {
        // Huge noise on Ŝ and ẑ and a tiny node make the target nearly flat relative to the proposal.
        let priors = Priors::new(DVector::zeros(1), PsdMatrix::identity(1), 5.0, 4.0, PsdMatrix::identity(1), 2.0).unwrap();
        let mut st = state_1d(3.0, 1.0);
        st.adapt.alpha = 1e6;
        let node = NoisyStats {
            s_hat: SymMatrix::from_diagonal(&[3.0]),
            z_hat: DVector::from_element(1, 1.0),
            u_hat: None,
            n_rows: 3,
            calibration: NoiseCalibration::fixed(1e6, false),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut acc = 0;
        for _ in 0..500 {
            let (_, o) = mh_update_s(&st, 0, &node, SPrior::GramWishart, &priors, &mut rng).unwrap();
            acc += usize::from(o.accepted);
        }
        assert!(acc > 490, "accepted {acc}/500");
    }
}

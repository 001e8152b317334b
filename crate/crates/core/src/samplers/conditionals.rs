//! Closed-form full conditionals and the reduced-model likelihood of `ẑ`.

use nalgebra::{DMatrix, DVector};

use super::PosteriorGaussian;
use crate::dist::DistSpec;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, log_det_from_cholesky, PsdMatrix, SymMatrix};
use crate::model::Priors;

/// `σ_y² S + σ_z² I`.
pub(crate) fn zhat_cov(s: &DMatrix<f64>, sigma_y2: f64, sigma_z2: f64) -> DMatrix<f64> {
    let mut k = s * sigma_y2;
    for i in 0..k.nrows() {
        k[(i, i)] += sigma_z2;
    }
    k
}

/// `log N(ẑ; Sθ, σ_y² S + σ_z² I)`: the density of a node's noisy `z` with
/// the exact `z` integrated out.
pub fn loglik_zhat(z_hat: &DVector<f64>, s: &SymMatrix, theta: &DVector<f64>, sigma_y2: f64, sigma_z2: f64) -> Result<f64> {
    loglik_zhat_counted(z_hat, s.as_matrix(), theta, sigma_y2, sigma_z2).map(|(v, _)| v)
}

/// As [`loglik_zhat`], also reporting whether jitter was needed.
pub(crate) fn loglik_zhat_counted(
    z_hat: &DVector<f64>,
    s: &DMatrix<f64>,
    theta: &DVector<f64>,
    sigma_y2: f64,
    sigma_z2: f64,
) -> Result<(f64, bool)> {
    let d = z_hat.len();
    if s.nrows() != d || theta.len() != d {
        return Err(Error::dims(format!("ẑ has length {d}, S is {}x{}, θ has length {}", s.nrows(), s.ncols(), theta.len())));
    }
    if !(sigma_y2 >= 0.0 && sigma_z2 >= 0.0) {
        return Err(Error::invalid("variances must be non-negative"));
    }
    let k = zhat_cov(s, sigma_y2, sigma_z2);
    let (ch, jittered) = cholesky_jittered(&k)
        .map_err(|_| Error::numerical("covariance σ_y²S + σ_z²I is singular"))?;
    let r = z_hat - s * theta;
    let quad = r.dot(&ch.solve(&r));
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    Ok((-0.5 * (d as f64 * ln2pi + log_det_from_cholesky(&ch) + quad), jittered))
}

/// `Σ_x | S_1:J ~ IW(Λ + Σ_j S_j, κ + n)` where `n` is the total row count.
pub fn sigma_x_conditional(s_list: &[PsdMatrix], n_total: usize, priors: &Priors) -> Result<DistSpec> {
    let mut scale = priors.lambda.clone();
    for s in s_list {
        if s.dim() != priors.dim() {
            return Err(Error::dims("S_j and Λ differ in dimension"));
        }
        scale = scale.add(s)?;
    }
    DistSpec::inv_wishart(scale, priors.kappa + n_total as f64)
}

/// One node's contribution to the `θ` conditional.
pub(crate) struct NodeTerm<'a> {
    pub s: &'a DMatrix<f64>,
    pub z_hat: &'a DVector<f64>,
    pub sigma_z2: f64,
}

/// Posterior of `θ` given `S_1:J`, `ẑ_1:J`, `σ_y²`; also returns the number
/// of factorisations that needed jitter.
pub(crate) fn theta_posterior<'a>(
    terms: impl IntoIterator<Item = NodeTerm<'a>>,
    sigma_y2: f64,
    priors: &Priors,
) -> Result<(PosteriorGaussian, u64)> {
    let d = priors.dim();
    let c_inv = priors.c_inv();
    let mut precision = c_inv.clone();
    let mut rhs = &c_inv * &priors.m;
    let mut jitter = 0;
    for t in terms {
        if t.s.nrows() != d || t.z_hat.len() != d {
            return Err(Error::dims(format!("node statistics have dimension {} but priors have {d}", t.z_hat.len())));
        }
        if !(sigma_y2 >= 0.0 && t.sigma_z2 >= 0.0) {
            return Err(Error::invalid("variances must be non-negative"));
        }
        let k = zhat_cov(t.s, sigma_y2, t.sigma_z2);
        let (ch, j) = cholesky_jittered(&k)
            .map_err(|_| Error::numerical("inner matrix σ_y²S_j + σ_z²I is singular"))?;
        jitter += u64::from(j);
        // S K⁻¹ = (K⁻¹ S)ᵀ because both S and K are symmetric.
        let k_inv_s = ch.solve(t.s);
        precision += t.s * &k_inv_s;
        rhs += k_inv_s.transpose() * t.z_hat;
    }
    let precision = (&precision + precision.transpose()) * 0.5;
    let (ch, j) = cholesky_jittered(&precision)?;
    jitter += u64::from(j);
    let mean = ch.solve(&rhs);
    let cov = SymMatrix::symmetrize(&ch.inverse())?;
    Ok((PosteriorGaussian { mean, cov: PsdMatrix::new_unchecked(cov) }, jitter))
}

/// `θ | S_1:J, σ_y², ẑ_1:J ~ N(m_p, Σ_p)` with
/// `Σ_p⁻¹ = Σ_j S_j K_j⁻¹ S_j + C⁻¹`, `m_p = Σ_p(Σ_j S_j K_j⁻¹ ẑ_j + C⁻¹m)`
/// and `K_j = σ_y² S_j + σ_z² I`.
pub fn theta_conditional(
    s_list: &[PsdMatrix],
    z_hat_list: &[DVector<f64>],
    sigma_y2: f64,
    sigma_z2: f64,
    priors: &Priors,
) -> Result<PosteriorGaussian> {
    if s_list.len() != z_hat_list.len() {
        return Err(Error::dims(format!("{} S matrices but {} ẑ vectors", s_list.len(), z_hat_list.len())));
    }
    let terms = s_list
        .iter()
        .zip(z_hat_list)
        .map(|(s, z_hat)| NodeTerm { s: s.as_matrix(), z_hat, sigma_z2 });
    theta_posterior(terms, sigma_y2, priors).map(|(p, _)| p)
}

/// `log N(ẑ; Sθ, K)` summed over nodes, for the `σ_y²` move.
pub(crate) fn total_loglik<'a>(
    terms: impl IntoIterator<Item = NodeTerm<'a>>,
    theta: &DVector<f64>,
    sigma_y2: f64,
) -> Result<(f64, u64)> {
    let mut total = 0.0;
    let mut jitter = 0;
    for t in terms {
        let (v, j) = loglik_zhat_counted(t.z_hat, t.s, theta, sigma_y2, t.sigma_z2)?;
        total += v;
        jitter += u64::from(j);
    }
    Ok((total, jitter))
}

/// Reference value of `log N` computed through the generic density, for tests.
#[cfg(test)]
pub(crate) fn loglik_reference(z_hat: &DVector<f64>, s: &DMatrix<f64>, theta: &DVector<f64>, sigma_y2: f64, sigma_z2: f64) -> f64 {
    crate::dist::ln_mvn(z_hat, &(s * theta), &zhat_cov(s, sigma_y2, sigma_z2))
}

//! Distributed adaSSP: each node releases a noisy Gram matrix, a noisy
//! cross-moment and a privately chosen ridge penalty; the pooled ridge
//! solution is returned.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::model::{summarize, Dataset};
use crate::privacy::{perturb_stats, DataBounds, NoiseCalibration, PrivacyBudget};

/// How the noisy minimum eigenvalue is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMinVariant {
    /// `λ_min + √L σ v − L σ v` with one shared draw `v`, `L = ln(6/δ)`.
    #[default]
    SharedDraw,
    /// `λ_min + √L σ v − L σ`, a noisy value shifted down by a fixed margin.
    Shifted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaSspConfig {
    /// Failure probability `ρ` of the eigenvalue bound.
    pub rho: f64,
    pub budget: PrivacyBudget,
    pub lambda_min_variant: LambdaMinVariant,
    /// Skip every noise draw. Test use only.
    pub noiseless: bool,
}

impl AdaSspConfig {
    pub fn new(budget: PrivacyBudget) -> Self {
        Self { rho: 0.05, budget, lambda_min_variant: LambdaMinVariant::default(), noiseless: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::invalid(format!("ρ must lie in (0, 1), got {}", self.rho)));
        }
        self.budget.validate()
    }
}

/// What one node shares.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaSspRelease {
    pub s_hat: SymMatrix,
    pub z_hat: DVector<f64>,
    pub lambda: f64,
}

/// Node-side computation. Two thirds of the budget go to `(Ŝ, ẑ)`, released
/// jointly with sensitivity `√(‖X‖⁴ + ‖X‖²‖Y‖²)`; the last third privatises
/// the minimum eigenvalue of `S` with scale `σ = ‖X‖²/(ε/3)`.
pub fn adassp_node_release<R: Rng + ?Sized>(
    shard: &Dataset,
    bounds: &DataBounds,
    config: &AdaSspConfig,
    rng: &mut R,
) -> Result<AdaSspRelease> {
    config.validate()?;
    bounds.validate()?;
    let d = shard.dim();
    let stats = summarize(shard, false);
    let eps = config.budget.epsilon;
    let delta = config.budget.delta;
    let calib = if config.noiseless {
        NoiseCalibration::noiseless(false)
    } else {
        NoiseCalibration::new(&config.budget.fraction(2.0 / 3.0)?, bounds)?
    };
    let noisy = perturb_stats(&stats, &calib, rng, false)?;

    let lambda_min = stats.s.eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let (sigma, v) = if config.noiseless {
        (0.0, 0.0)
    } else {
        (bounds.x_norm * bounds.x_norm / (eps / 3.0), rng.sample::<f64, _>(StandardNormal))
    };
    let l = (6.0 / delta).ln();
    let noisy_min = match config.lambda_min_variant {
        LambdaMinVariant::SharedDraw => lambda_min + l.sqrt() * sigma * v - l * sigma * v,
        LambdaMinVariant::Shifted => lambda_min + l.sqrt() * sigma * v - l * sigma,
    };
    let lambda_min_tilde = noisy_min.max(0.0);
    let df = d as f64;
    let lambda = (sigma * (df * l * (2.0 * df * df / config.rho).ln()).sqrt() - lambda_min_tilde).max(0.0);
    Ok(AdaSspRelease { s_hat: noisy.s_hat, z_hat: noisy.z_hat, lambda })
}

/// `θ̂ = (Σ_j Ŝ_j + I Σ_j λ_j)⁻¹ Σ_j ẑ_j`.
pub fn adassp_combine(releases: &[AdaSspRelease]) -> Result<DVector<f64>> {
    let first = releases.first().ok_or_else(|| Error::invalid("no adaSSP releases to combine"))?;
    let d = first.z_hat.len();
    let mut s = first.s_hat.as_matrix().clone() * 0.0;
    let mut z = DVector::zeros(d);
    let mut lambda = 0.0;
    for r in releases {
        if r.z_hat.len() != d {
            return Err(Error::dims("adaSSP releases differ in dimension"));
        }
        s += r.s_hat.as_matrix();
        z += &r.z_hat;
        lambda += r.lambda;
    }
    for i in 0..d {
        s[(i, i)] += lambda;
    }
    s.lu()
        .solve(&z)
        .filter(|t| t.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::numerical("pooled adaSSP matrix is singular"))
}

/// Runs every node and pools the releases.
pub fn adassp_estimate<R: Rng + ?Sized>(
    shards: &[Dataset],
    bounds: &DataBounds,
    config: &AdaSspConfig,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if shards.is_empty() {
        return Err(Error::invalid("adaSSP needs at least one shard"));
    }
    let d = shards[0].dim();
    if shards.iter().any(|s| s.dim() != d) {
        return Err(Error::dims("shards differ in dimension"));
    }
    let releases = shards
        .iter()
        .map(|s| adassp_node_release(s, bounds, config, rng))
        .collect::<Result<Vec<_>>>()?;
    adassp_combine(&releases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::compute_bounds;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data() -> Dataset {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.2, 0.3, -1.0, -0.5, 0.5, 0.9, 0.1, -0.2, -0.7]);
        let y = DVector::from_vec(vec![1.0, -0.4, 0.2, 0.8, -0.9]);
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn noiseless_equals_ols() {
        let d = data();
        let b = compute_bounds(&d);
        let cfg = AdaSspConfig { noiseless: true, ..AdaSspConfig::new(PrivacyBudget::new(1.0, 1e-5).unwrap()) };
        let theta = adassp_estimate(std::slice::from_ref(&d), &b, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ols = (d.x().tr_mul(d.x())).lu().solve(&d.x().tr_mul(d.y())).unwrap();
        assert!((theta - ols).norm() < 1e-10);
    }

    #[test]
    fn pooled_sums_are_additive() {
        let r1 = AdaSspRelease { s_hat: SymMatrix::identity(2), z_hat: DVector::from_vec(vec![1.0, 0.0]), lambda: 0.5 };
        let r2 = AdaSspRelease { s_hat: SymMatrix::identity(2).scale(2.0), z_hat: DVector::from_vec(vec![0.0, 2.0]), lambda: 0.5 };
        let merged = AdaSspRelease {
            s_hat: SymMatrix::identity(2).scale(3.0),
            z_hat: DVector::from_vec(vec![1.0, 2.0]),
            lambda: 1.0,
        };
        let a = adassp_combine(&[r1, r2]).unwrap();
        let b = adassp_combine(&[merged]).unwrap();
        assert!((a - b).norm() < 1e-15);
    }

    #[test]
    fn lambda_is_nonnegative_and_noise_scales() {
        let d = data();
        let b = compute_bounds(&d);
        let cfg = AdaSspConfig::new(PrivacyBudget::new(0.5, 1e-5).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r = adassp_node_release(&d, &b, &cfg, &mut rng).unwrap();
            assert!(r.lambda >= 0.0);
        }
    }

    #[test]
    fn rejects_bad_rho() {
        let cfg = AdaSspConfig { rho: 1.5, ..AdaSspConfig::new(PrivacyBudget::new(1.0, 1e-5).unwrap()) };
        assert!(cfg.validate().is_err());
    }
}

//! Gaussian-mechanism calibration and perturbation of summary statistics.
//!
//! The noise multiplier comes from the analytic calibration of the Gaussian
//! mechanism: for unit sensitivity, noise scale `σ` gives `(ε, δ)`-DP iff
//!
//! ```text
//! Φ(1/(2σ) − εσ) − e^ε Φ(−1/(2σ) − εσ) ≤ δ
//! ```
//!
//! The left side is strictly decreasing in `σ`; [`analytic_gaussian_sigma`]
//! finds the smallest `σ` satisfying it by bisection.
//!
//! Perturbation releases `Ŝ = S + σ_s M` and `ẑ = z + σ_z v` where `M` is
//! symmetric with i.i.d. `N(0, 1)` upper triangle. The diagonal of `M` has
//! the same unit variance as the off-diagonal entries.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::model::SummaryStats;

/// An `(ε, δ)` privacy budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let b = Self { epsilon, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive and finite, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    /// The budget scaled by `fraction` in both coordinates.
    pub fn fraction(&self, fraction: f64) -> Result<Self> {
        Self::new(self.epsilon * fraction, self.delta * fraction)
    }
}

/// Public bounds on the data: the largest feature-row L2 norm and the
/// largest absolute response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataBounds {
    pub x_norm: f64,
    pub y_norm: f64,
}

impl DataBounds {
    pub fn new(x_norm: f64, y_norm: f64) -> Result<Self> {
        let b = Self { x_norm, y_norm };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_norm >= 0.0 && self.x_norm.is_finite() && self.y_norm >= 0.0 && self.y_norm.is_finite()) {
            return Err(Error::invalid(format!(
                "data bounds must be finite and non-negative, got ({}, {})",
                self.x_norm, self.y_norm
            )));
        }
        Ok(())
    }
}

/// `ln Φ(x)` accurate in both tails.
pub fn ln_normal_cdf(x: f64) -> f64 {
    if x > 0.0 {
        (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else if x > -30.0 {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        // Asymptotic series for the Mills ratio.
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + series.ln()
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Smallest `δ` for which the unit-sensitivity Gaussian mechanism with
/// noise scale `sigma` is `(epsilon, δ)`-DP.
pub fn privacy_curve_delta(epsilon: f64, sigma: f64) -> f64 {
    let a = 0.5 / sigma - epsilon * sigma;
    let b = -0.5 / sigma - epsilon * sigma;
    ln_normal_cdf(a).exp() - (epsilon + ln_normal_cdf(b)).exp()
}

/// Noise multiplier `σ(ε, δ)` of the analytic Gaussian mechanism with unit
/// sensitivity, solved to relative tolerance `1e-12`.
pub fn analytic_gaussian_sigma(budget: &PrivacyBudget) -> Result<f64> {
    budget.validate()?;
    let eps = budget.epsilon;
    let target = budget.delta;
    let ok = |s: f64| privacy_curve_delta(eps, s) <= target;

    let mut hi = 1.0;
    while !ok(hi) {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::numerical("could not bracket the analytic Gaussian noise scale"));
        }
    }
    let mut lo = hi;
    while ok(lo) {
        lo *= 0.5;
        if lo < 1e-300 {
            return Err(Error::numerical("could not bracket the analytic Gaussian noise scale"));
        }
    }
    // Geometric steps while the bracket spans orders of magnitude, then arithmetic.
    while hi / lo > 2.0 {
        let mid = (lo * hi).sqrt();
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Joint L2 sensitivity of `[S, z]`: `sqrt(‖X‖⁴ + ‖X‖²‖Y‖²)`.
pub fn sensitivity_sz(bounds: &DataBounds) -> f64 {
    let x2 = bounds.x_norm * bounds.x_norm;
    let y2 = bounds.y_norm * bounds.y_norm;
    (x2 * x2 + x2 * y2).sqrt()
}

/// Joint L2 sensitivity of `[S, z, yᵀy]`: `sqrt(‖X‖⁴ + ‖X‖²‖Y‖² + ‖Y‖⁴)`.
pub fn sensitivity_ss(bounds: &DataBounds) -> f64 {
    let x2 = bounds.x_norm * bounds.x_norm;
    let y2 = bounds.y_norm * bounds.y_norm;
    (x2 * x2 + x2 * y2 + y2 * y2).sqrt()
}

/// Noise scales applied to a node's statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    /// `σ(ε, δ)` for unit sensitivity.
    pub sigma_mult: f64,
    /// L2 sensitivity of the released statistic vector.
    pub sensitivity: f64,
    pub sigma_s: f64,
    pub sigma_z: f64,
    /// Whether the sensitivity also covers `u = yᵀy`.
    pub covers_u: bool,
}

impl NoiseCalibration {
    /// Calibration for releasing `(S, z)` under `budget`.
    pub fn new(budget: &PrivacyBudget, bounds: &DataBounds) -> Result<Self> {
        bounds.validate()?;
        let mult = analytic_gaussian_sigma(budget)?;
        Ok(Self::from_parts(mult, sensitivity_sz(bounds), false))
    }

    /// Calibration for releasing `(S, z, u)` under `budget`.
    pub fn extended(budget: &PrivacyBudget, bounds: &DataBounds) -> Result<Self> {
        bounds.validate()?;
        let mult = analytic_gaussian_sigma(budget)?;
        Ok(Self::from_parts(mult, sensitivity_ss(bounds), true))
    }

    pub fn from_parts(sigma_mult: f64, sensitivity: f64, covers_u: bool) -> Self {
        let sigma = sensitivity * sigma_mult;
        Self { sigma_mult, sensitivity, sigma_s: sigma, sigma_z: sigma, covers_u }
    }

    /// A fixed noise scale, bypassing the budget. Test and diagnostic use only.
    pub fn fixed(sigma: f64, covers_u: bool) -> Self {
        Self::from_parts(sigma, 1.0, covers_u)
    }

    /// No noise at all. Test and diagnostic use only.
    pub fn noiseless(covers_u: bool) -> Self {
        Self::from_parts(1.0, 0.0, covers_u)
    }

    pub fn sigma_z2(&self) -> f64 {
        self.sigma_z * self.sigma_z
    }
}

/// Privately released statistics of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyStats {
    pub s_hat: SymMatrix,
    pub z_hat: DVector<f64>,
    pub u_hat: Option<f64>,
    pub n_rows: usize,
    pub calibration: NoiseCalibration,
}

impl NoisyStats {
    pub fn dim(&self) -> usize {
        self.z_hat.len()
    }
}

/// Symmetric noise matrix with i.i.d. standard normal upper triangle
/// (diagonal included), drawn in row-major upper-triangle order.
pub fn symmetric_noise<R: Rng + ?Sized>(d: usize, rng: &mut R) -> SymMatrix {
    let values: Vec<f64> = (0..d * (d + 1) / 2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    SymMatrix::from_upper_triangle(d, &values).expect("length matches by construction")
}

/// Releases `Ŝ = S + σ_s M`, `ẑ = z + σ_z v` and, when requested,
/// `û = u + σ_s w`. Only the summary statistics are read.
pub fn perturb_stats<R: Rng + ?Sized>(
    stats: &SummaryStats,
    calib: &NoiseCalibration,
    rng: &mut R,
    include_u: bool,
) -> Result<NoisyStats> {
    let d = stats.s.dim();
    if stats.z.len() != d {
        return Err(Error::dims(format!("S is {d}x{d} but z has length {}", stats.z.len())));
    }
    if !(calib.sigma_s >= 0.0 && calib.sigma_z >= 0.0) {
        return Err(Error::invalid("noise scales must be non-negative"));
    }
    if include_u && !calib.covers_u {
        return Err(Error::invalid(
            "releasing yᵀy needs a calibration whose sensitivity covers it (NoiseCalibration::extended)",
        ));
    }
    let u = if include_u {
        Some(stats.u.ok_or_else(|| Error::invalid("summary statistics do not include yᵀy"))?)
    } else {
        None
    };

    let m = symmetric_noise(d, rng);
    let s_hat = stats.s.add(&m.scale(calib.sigma_s))?;
    let v: DVector<f64> = crate::dist::standard_normal_vector(d, rng);
    let z_hat = &stats.z + v * calib.sigma_z;
    let u_hat = u.map(|u| u + calib.sigma_s * rng.sample::<f64, _>(StandardNormal));
    Ok(NoisyStats { s_hat, z_hat, u_hat, n_rows: stats.n_rows, calibration: *calib })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sensitivities() {
        let b = |x, y| DataBounds::new(x, y).unwrap();
        assert!((sensitivity_sz(&b(1.0, 1.0)) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(sensitivity_sz(&b(0.0, 5.0)), 0.0);
        assert!((sensitivity_sz(&b(2.0, 3.0)) - 52f64.sqrt()).abs() < 1e-14);
        assert!((sensitivity_ss(&b(1.0, 1.0)) - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(sensitivity_ss(&b(2.0, 0.0)), 4.0);
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(0.0, 1e-5).is_err());
        assert!(PrivacyBudget::new(-1.0, 1e-5).is_err());
        assert!(PrivacyBudget::new(1.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(PrivacyBudget::new(f64::INFINITY, 0.1).is_err());
        assert!(DataBounds::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn sigma_monotone_and_below_classical() {
        let s = |e, d| analytic_gaussian_sigma(&PrivacyBudget::new(e, d).unwrap()).unwrap();
        assert!(s(1.0, 1e-6) > s(2.0, 1e-6));
        assert!(s(1.0, 1e-6) > s(1.0, 1e-5));
        let classical = (2.0 * (1.25f64 / 1e-6).ln()).sqrt();
        assert!(s(1.0, 1e-6) <= classical);
    }

    #[test]
    fn sigma_solves_the_curve() {
        for &(e, d) in &[(0.1, 1e-8), (1.0, 1e-6), (10.0, 1e-10), (1e6, 1e-3)] {
            let s = analytic_gaussian_sigma(&PrivacyBudget::new(e, d).unwrap()).unwrap();
            assert!(privacy_curve_delta(e, s) <= d);
            assert!(privacy_curve_delta(e, s * (1.0 - 1e-9)) > d * (1.0 - 1e-6));
        }
    }

    #[test]
    fn ln_cdf_tails() {
        assert!((ln_normal_cdf(0.0) - 0.5f64.ln()).abs() < 1e-15);
        // Reference values computed with 40-digit arithmetic.
        for &(x, want) in &[(-35.0, -616.975_101_261_922_5), (-10.0, -53.231_285_150_512_47), (3.0, -0.001_350_809_964_748_194)] {
            let got = ln_normal_cdf(x);
            assert!(((got - want) / want).abs() < 1e-12, "x={x}: {got} vs {want}");
        }
        // Continuity across the branch point.
        assert!((ln_normal_cdf(-30.0 - 1e-9) - ln_normal_cdf(-30.0 + 1e-9)).abs() < 1e-5);
        assert!(ln_normal_cdf(40.0) <= 0.0);
    }

    fn stats() -> SummaryStats {
        SummaryStats {
            s: SymMatrix::from_upper(&DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0])).unwrap(),
            z: DVector::from_vec(vec![1.0, -1.0]),
            u: Some(4.0),
            n_rows: 10,
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = perturb_stats(&stats(), &NoiseCalibration::noiseless(true), &mut rng, true).unwrap();
        assert_eq!(out.s_hat, stats().s);
        assert_eq!(out.z_hat, stats().z);
        assert_eq!(out.u_hat, Some(4.0));
    }

    #[test]
    fn perturbation_is_symmetric_and_deterministic() {
        let calib = NoiseCalibration::fixed(3.0, false);
        let a = perturb_stats(&stats(), &calib, &mut ChaCha8Rng::seed_from_u64(9), false).unwrap();
        let b = perturb_stats(&stats(), &calib, &mut ChaCha8Rng::seed_from_u64(9), false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.s_hat.get(0, 1).to_bits(), a.s_hat.get(1, 0).to_bits());
        assert!(a.u_hat.is_none());
    }

    #[test]
    fn releasing_u_needs_extended_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let calib = NoiseCalibration::fixed(1.0, false);
        assert!(perturb_stats(&stats(), &calib, &mut rng, true).is_err());
    }

    #[test]
    fn calibration_consistency() {
        let budget = PrivacyBudget::new(0.7, 1e-7).unwrap();
        let bounds = DataBounds::new(1.3, 2.1).unwrap();
        let c = NoiseCalibration::new(&budget, &bounds).unwrap();
        let expected = sensitivity_sz(&bounds) * analytic_gaussian_sigma(&budget).unwrap();
        assert_eq!(c.sigma_s, expected);
        assert_eq!(c.sigma_z, expected);
    }
}

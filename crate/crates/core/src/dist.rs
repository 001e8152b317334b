//! Sampling and log-densities for the distribution families the model uses:
//! multivariate normal, Wishart, inverse-Wishart and inverse-gamma.
//!
//! Parameterisations follow the usual conventions: `W(V, ν)` has mean `νV`,
//! `IW(Ψ, ν)` has mean `Ψ / (ν − d − 1)`, and `IG(a, b)` has density
//! `b^a / Γ(a) · x^{−a−1} e^{−b/x}`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use libm::lgamma as ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, log_det_from_cholesky, psd_sqrt, PsdMatrix, SymMatrix};

/// A fully parameterised distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum DistSpec {
    Mvn { mean: DVector<f64>, cov: PsdMatrix },
    Wishart { scale: PsdMatrix, dof: f64 },
    InvWishart { scale: PsdMatrix, dof: f64 },
    InvGamma { shape: f64, scale: f64 },
}

/// A value in the support of some [`DistSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum Draw {
    Vector(DVector<f64>),
    Matrix(SymMatrix),
    Scalar(f64),
}

impl Draw {
    pub fn as_vector(&self) -> Option<&DVector<f64>> {
        match self {
            Draw::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_matrix(&self) -> Option<&SymMatrix> {
        match self {
            Draw::Matrix(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Draw::Scalar(x) => Some(*x),
            _ => None,
        }
    }
}

fn check_dof(dof: f64, d: usize) -> Result<()> {
    if !dof.is_finite() || dof <= d as f64 - 1.0 {
        return Err(Error::invalid(format!(
            "degrees of freedom must exceed d - 1 = {}, got {dof}",
            d as f64 - 1.0
        )));
    }
    Ok(())
}

fn check_pd(scale: &PsdMatrix) -> Result<()> {
    if nalgebra::Cholesky::new(scale.as_matrix().clone()).is_none() {
        return Err(Error::invalid("scale matrix must be positive definite"));
    }
    Ok(())
}

impl DistSpec {
    pub fn mvn(mean: DVector<f64>, cov: PsdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::dims(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        Ok(Self::Mvn { mean, cov })
    }

    pub fn wishart(scale: PsdMatrix, dof: f64) -> Result<Self> {
        check_dof(dof, scale.dim())?;
        check_pd(&scale)?;
        Ok(Self::Wishart { scale, dof })
    }

    pub fn inv_wishart(scale: PsdMatrix, dof: f64) -> Result<Self> {
        check_dof(dof, scale.dim())?;
        check_pd(&scale)?;
        Ok(Self::InvWishart { scale, dof })
    }

    pub fn inv_gamma(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite() && scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!(
                "inverse-gamma needs positive shape and scale, got ({shape}, {scale})"
            )));
        }
        Ok(Self::InvGamma { shape, scale })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Draw> {
        match self {
            DistSpec::Mvn { mean, cov } => Ok(Draw::Vector(sample_mvn(mean, cov.as_sym(), rng))),
            DistSpec::Wishart { scale, dof } => {
                Ok(Draw::Matrix(sample_wishart(scale.as_matrix(), *dof, rng)?))
            }
            DistSpec::InvWishart { scale, dof } => {
                Ok(Draw::Matrix(sample_inv_wishart(scale.as_matrix(), *dof, rng)?))
            }
            DistSpec::InvGamma { shape, scale } => Ok(Draw::Scalar(sample_inv_gamma(*shape, *scale, rng))),
        }
    }

    /// Log-density at `x`; `-inf` outside the support or for a draw of the wrong kind.
    pub fn log_density(&self, x: &Draw) -> f64 {
        match (self, x) {
            (DistSpec::Mvn { mean, cov }, Draw::Vector(v)) => ln_mvn(v, mean, cov.as_matrix()),
            (DistSpec::Wishart { scale, dof }, Draw::Matrix(m)) => {
                ln_wishart(m.as_matrix(), scale.as_matrix(), *dof)
            }
            (DistSpec::InvWishart { scale, dof }, Draw::Matrix(m)) => {
                ln_inv_wishart(m.as_matrix(), scale.as_matrix(), *dof)
            }
            (DistSpec::InvGamma { shape, scale }, Draw::Scalar(v)) => ln_inv_gamma(*v, *shape, *scale),
            _ => f64::NEG_INFINITY,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DistSpec::Mvn { mean, .. } => mean.len(),
            DistSpec::Wishart { scale, .. } | DistSpec::InvWishart { scale, .. } => scale.dim(),
            DistSpec::InvGamma { .. } => 1,
        }
    }
}

pub fn standard_normal_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draw from `N(mean, cov)`. Uses a Cholesky factor when one exists and the
/// symmetric square root otherwise, so singular covariances are allowed.
pub fn sample_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &SymMatrix, rng: &mut R) -> DVector<f64> {
    let xi = standard_normal_vector(mean.len(), rng);
    match nalgebra::Cholesky::new(cov.as_matrix().clone()) {
        Some(ch) => mean + ch.l() * xi,
        None => mean + psd_sqrt(cov) * xi,
    }
}

/// Bartlett factor `A` for a `W(I, dof)` draw: lower triangular with
/// `A_ii = sqrt(χ²_{dof − i})` and standard normal entries below the diagonal.
fn bartlett_factor<R: Rng + ?Sized>(d: usize, dof: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(dof - i as f64)
            .map_err(|e| Error::invalid(format!("chi-squared dof {}: {e}", dof - i as f64)))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(a)
}

/// Draw from `W(scale, dof)` via the Bartlett decomposition.
pub fn sample_wishart<R: Rng + ?Sized>(scale: &DMatrix<f64>, dof: f64, rng: &mut R) -> Result<SymMatrix> {
    let d = scale.nrows();
    check_dof(dof, d)?;
    let l = nalgebra::Cholesky::new(scale.clone())
        .ok_or_else(|| Error::invalid("Wishart scale must be positive definite"))?
        .l();
    let la = l * bartlett_factor(d, dof, rng)?;
    SymMatrix::symmetrize(&(&la * la.transpose()))
}

/// Draw from `IW(scale, dof)` as the inverse of a `W(scale⁻¹, dof)` draw.
pub fn sample_inv_wishart<R: Rng + ?Sized>(scale: &DMatrix<f64>, dof: f64, rng: &mut R) -> Result<SymMatrix> {
    let inv_scale = nalgebra::Cholesky::new(scale.clone())
        .ok_or_else(|| Error::invalid("inverse-Wishart scale must be positive definite"))?
        .inverse();
    let w = sample_wishart(&SymMatrix::symmetrize(&inv_scale)?.into_matrix(), dof, rng)?;
    let (ch, _) = cholesky_jittered(w.as_matrix())?;
    SymMatrix::symmetrize(&ch.inverse())
}

pub fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / scale).expect("inverse-gamma parameters validated by caller");
    1.0 / g.sample(rng)
}

/// `log Γ_d(a)`, the multivariate log-gamma function.
pub fn ln_multigamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * PI.ln() + (1..=d).map(|i| ln_gamma(a + (1.0 - i as f64) / 2.0)).sum::<f64>()
}

pub fn ln_mvn(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let Some(ch) = nalgebra::Cholesky::new(cov.clone()) else {
        return f64::NEG_INFINITY;
    };
    let r = x - mean;
    let sol = ch.solve(&r);
    -0.5 * (d * (2.0 * PI).ln() + log_det_from_cholesky(&ch) + r.dot(&sol))
}

/// `log W(x; scale, dof)`; `-inf` when `x` is not positive definite.
pub fn ln_wishart(x: &DMatrix<f64>, scale: &DMatrix<f64>, dof: f64) -> f64 {
    let d = x.nrows();
    let df = d as f64;
    let (Some(cx), Some(cs)) = (
        nalgebra::Cholesky::new(x.clone()),
        nalgebra::Cholesky::new(scale.clone()),
    ) else {
        return f64::NEG_INFINITY;
    };
    let ld_x = log_det_from_cholesky(&cx);
    let ld_s = log_det_from_cholesky(&cs);
    let tr = cs.solve(x).trace();
    0.5 * (dof - df - 1.0) * ld_x - 0.5 * tr - 0.5 * dof * df * std::f64::consts::LN_2 - 0.5 * dof * ld_s
        - ln_multigamma(d, 0.5 * dof)
}

/// `log IW(x; scale, dof)`; `-inf` when `x` is not positive definite.
pub fn ln_inv_wishart(x: &DMatrix<f64>, scale: &DMatrix<f64>, dof: f64) -> f64 {
    let d = x.nrows();
    let df = d as f64;
    let (Some(cx), Some(cs)) = (
        nalgebra::Cholesky::new(x.clone()),
        nalgebra::Cholesky::new(scale.clone()),
    ) else {
        return f64::NEG_INFINITY;
    };
    let ld_x = log_det_from_cholesky(&cx);
    let ld_s = log_det_from_cholesky(&cs);
    let tr = cx.solve(scale).trace();
    0.5 * dof * ld_s - 0.5 * dof * df * std::f64::consts::LN_2 - ln_multigamma(d, 0.5 * dof)
        - 0.5 * (dof + df + 1.0) * ld_x
        - 0.5 * tr
}

pub fn ln_inv_gamma(x: f64, shape: f64, scale: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

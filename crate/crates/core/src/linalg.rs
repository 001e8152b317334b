//! Small dense symmetric-matrix utilities.
//!
//! Matrices here are at most a few dozen rows wide, so everything is dense
//! and row/column storage is left to `nalgebra`. [`SymMatrix`] guarantees
//! bit-exact symmetry: every constructor copies or averages the upper
//! triangle into the lower one.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue tolerance used by [`PsdMatrix::new`].
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Eigenvalues below this fraction of the largest one are zeroed by [`nearest_psd`].
pub const EIGEN_CUTOFF: f64 = 1e-12;

/// A square matrix that is exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Builds a symmetric matrix from the upper triangle of `m`.
    pub fn from_upper(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::dims(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let d = m.nrows();
        let mut out = m.clone();
        for i in 0..d {
            for j in 0..i {
                out[(i, j)] = m[(j, i)];
            }
        }
        Ok(Self(out))
    }

    /// Returns `(m + mᵀ) / 2`. Floating-point addition commutes, so the result
    /// is exactly symmetric.
    pub fn symmetrize(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::dims(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self((m + m.transpose()) * 0.5))
    }

    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    pub fn zeros(d: usize) -> Self {
        Self(DMatrix::zeros(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Row-major upper triangle `(0,0), (0,1), …, (0,d-1), (1,1), …`.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in i..d {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    /// Inverse of [`SymMatrix::upper_triangle`].
    pub fn from_upper_triangle(d: usize, values: &[f64]) -> Result<Self> {
        if values.len() != d * (d + 1) / 2 {
            return Err(Error::dims(format!(
                "upper triangle of a {d}x{d} matrix has {} entries, got {}",
                d * (d + 1) / 2,
                values.len()
            )));
        }
        let mut m = DMatrix::zeros(d, d);
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                m[(i, j)] = values[k];
                m[(j, i)] = values[k];
                k += 1;
            }
        }
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::dims(format!(
                "cannot add {}x{} and {}x{} matrices",
                self.dim(),
                self.dim(),
                other.dim(),
                other.dim()
            )));
        }
        Ok(Self(&self.0 + &other.0))
    }

    pub fn scale(&self, factor: f64) -> SymMatrix {
        Self(&self.0 * factor)
    }

    /// Eigenvalues (unsorted) and eigenvectors of the matrix.
    pub fn eigen(&self) -> SymmetricEigen<f64, Dyn> {
        SymmetricEigen::new(self.0.clone())
    }

    pub fn frobenius_distance(&self, other: &SymMatrix) -> f64 {
        (&self.0 - &other.0).norm()
    }
}

/// A numerically positive semi-definite symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdMatrix(SymMatrix);

impl PsdMatrix {
    /// Validates that all eigenvalues are at least `-1e-10 * max|λ|`.
    pub fn new(m: SymMatrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        let eig = m.eigen();
        let scale = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if m.dim() > 0 && min < -PSD_TOLERANCE * scale {
            return Err(Error::invalid(format!(
                "matrix is not positive semi-definite (smallest eigenvalue {min:e})"
            )));
        }
        Ok(Self(m))
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        Self::new(SymMatrix::symmetrize(m)?)
    }

    pub(crate) fn new_unchecked(m: SymMatrix) -> Self {
        Self(m)
    }

    pub fn identity(d: usize) -> Self {
        Self(SymMatrix::identity(d))
    }

    pub fn scaled_identity(d: usize, factor: f64) -> Result<Self> {
        if !(factor >= 0.0) || !factor.is_finite() {
            return Err(Error::invalid(format!("scale factor must be non-negative, got {factor}")));
        }
        Ok(Self(SymMatrix::identity(d).scale(factor)))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn as_sym(&self) -> &SymMatrix {
        &self.0
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        self.0.as_matrix()
    }

    pub fn into_sym(self) -> SymMatrix {
        self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0.into_matrix()
    }

    /// Sum of two PSD matrices is PSD.
    pub fn add(&self, other: &PsdMatrix) -> Result<PsdMatrix> {
        Ok(Self(self.0.add(&other.0)?))
    }

    pub fn scale(&self, factor: f64) -> Result<PsdMatrix> {
        if !(factor >= 0.0) {
            return Err(Error::invalid(format!("cannot scale a PSD matrix by {factor}")));
        }
        Ok(Self(self.0.scale(factor)))
    }
}

fn rebuild(eig: &SymmetricEigen<f64, Dyn>, values: &DVector<f64>) -> DMatrix<f64> {
    let e = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(e.nrows(), e.ncols(), |i, k| e[(i, k)] * values[k]);
    let m = scaled * e.transpose();
    // The product is symmetric up to rounding; pin it to exact symmetry.
    (&m + m.transpose()) * 0.5
}

/// Frobenius-nearest positive semi-definite matrix: `E D₊ Eᵀ` where `D₊`
/// clips the eigenvalues of `a` at zero.
pub fn nearest_psd(a: &SymMatrix) -> Result<PsdMatrix> {
    if !a.is_finite() {
        return Err(Error::invalid("nearest_psd: matrix has non-finite entries"));
    }
    let eig = a.eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return Ok(PsdMatrix(a.clone()));
    }
    let clipped = eig.eigenvalues.map(|v| if v <= EIGEN_CUTOFF * max { 0.0 } else { v });
    Ok(PsdMatrix(SymMatrix(rebuild(&eig, &clipped))))
}

/// Raises every eigenvalue of `a` to at least `floor`, giving a strictly
/// positive definite matrix when `floor > 0`.
pub fn floor_eigenvalues(a: &SymMatrix, floor: f64) -> Result<PsdMatrix> {
    if !a.is_finite() {
        return Err(Error::invalid("floor_eigenvalues: matrix has non-finite entries"));
    }
    let eig = a.eigen();
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return Ok(PsdMatrix(a.clone()));
    }
    let floored = eig.eigenvalues.map(|v| v.max(floor));
    Ok(PsdMatrix(SymMatrix(rebuild(&eig, &floored))))
}

/// Cholesky factorisation, retrying once with `1e-10 * trace / d` added to
/// the diagonal. The flag reports whether jitter was needed.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok((ch, false));
    }
    let d = m.nrows().max(1) as f64;
    let scale = m.trace() / d;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::numerical("matrix is not positive definite and has no positive scale for jitter"));
    }
    let jitter = 1e-10 * scale;
    let mut jittered = m.clone();
    for i in 0..m.nrows() {
        jittered[(i, i)] += jitter;
    }
    Cholesky::new(jittered)
        .map(|ch| (ch, true))
        .ok_or_else(|| Error::numerical("matrix is not positive definite even after jitter"))
}

/// `log |m|` from a Cholesky factor.
pub fn log_det_from_cholesky(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `log |m|` for a positive definite matrix, `None` when factorisation fails.
pub fn log_det_pd(m: &DMatrix<f64>) -> Option<f64> {
    Cholesky::new(m.clone()).map(|ch| log_det_from_cholesky(&ch))
}

/// Symmetric square root `Q diag(√λ₊) Qᵀ` of a PSD matrix; used where a
/// Cholesky factor may not exist because the matrix is singular.
pub fn psd_sqrt(m: &SymMatrix) -> DMatrix<f64> {
    let eig = m.eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let e = &eig.eigenvectors;
    DMatrix::from_fn(e.nrows(), e.ncols(), |i, k| e[(i, k)] * roots[k]) * e.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(d: usize, v: &[f64]) -> SymMatrix {
        SymMatrix::from_upper(&DMatrix::from_row_slice(d, d, v)).unwrap()
    }

    #[test]
    fn clips_negative_diagonal() {
        let a = SymMatrix::from_diagonal(&[1.0, -2.0]);
        let p = nearest_psd(&a).unwrap();
        assert_eq!(p.as_sym(), &SymMatrix::from_diagonal(&[1.0, 0.0]));
    }

    #[test]
    fn psd_input_is_unchanged() {
        let a = sym(3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let p = nearest_psd(&a).unwrap();
        assert!(p.as_sym().frobenius_distance(&a) < 1e-12);
    }

    #[test]
    fn nearest_psd_rejects_nan() {
        let a = SymMatrix::from_diagonal(&[1.0, f64::NAN]);
        assert!(matches!(nearest_psd(&a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn nearest_psd_is_idempotent() {
        let a = sym(3, &[1.0, 2.0, -1.0, 2.0, -3.0, 0.5, -1.0, 0.5, 0.1]);
        let p1 = nearest_psd(&a).unwrap();
        let p2 = nearest_psd(p1.as_sym()).unwrap();
        assert!(p1.as_sym().frobenius_distance(p2.as_sym()) < 1e-12);
    }

    #[test]
    fn from_upper_copies_triangle() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 99.0, 3.0]);
        let s = SymMatrix::from_upper(&m).unwrap();
        assert_eq!(s.get(1, 0), 2.0);
        assert_eq!(s.upper_triangle(), vec![1.0, 2.0, 3.0]);
        assert_eq!(SymMatrix::from_upper_triangle(2, &[1.0, 2.0, 3.0]).unwrap(), s);
    }

    #[test]
    fn psd_check_rejects_indefinite() {
        assert!(PsdMatrix::new(SymMatrix::from_diagonal(&[1.0, -1e-3])).is_err());
        assert!(PsdMatrix::new(SymMatrix::from_diagonal(&[1.0, -1e-14])).is_ok());
    }

    #[test]
    fn floor_makes_positive_definite() {
        let a = SymMatrix::from_diagonal(&[2.0, 0.0]);
        let p = floor_eigenvalues(&a, 1e-3).unwrap();
        assert!(Cholesky::new(p.as_matrix().clone()).is_some());
        assert!((p.as_matrix()[(1, 1)] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, jittered) = cholesky_jittered(&m).unwrap();
        assert!(jittered);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_jittered(&m).is_err());
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let a = sym(2, &[2.0, 1.0, 1.0, 2.0]);
        let r = psd_sqrt(&a);
        assert!((&r * &r - a.as_matrix()).norm() < 1e-12);
    }
}

//! Regression data, summary statistics, priors and data transforms.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::{sample_inv_wishart, standard_normal_vector};
use crate::error::{Error, Result};
use crate::linalg::{PsdMatrix, SymMatrix};
use crate::privacy::DataBounds;

/// Design matrix (`n × d`) and response vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::invalid(format!(
                "dataset needs at least one row and one feature, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        if x.nrows() != y.len() {
            return Err(Error::dims(format!("X has {} rows but y has {} entries", x.nrows(), y.len())));
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("dataset has non-finite entries"));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Dataset made of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let x = self.x.select_rows(rows);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        Self::new(x, y)
    }

    /// Row-wise concatenation.
    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("cannot concatenate zero datasets"));
        };
        let d = first.dim();
        if parts.iter().any(|p| p.dim() != d) {
            return Err(Error::dims("datasets have different feature counts"));
        }
        let n: usize = parts.iter().map(|p| p.n_rows()).sum();
        let mut x = DMatrix::zeros(n, d);
        let mut y = DVector::zeros(n);
        let mut offset = 0;
        for p in parts {
            x.view_mut((offset, 0), (p.n_rows(), d)).copy_from(&p.x);
            y.rows_mut(offset, p.n_rows()).copy_from(&p.y);
            offset += p.n_rows();
        }
        Self::new(x, y)
    }
}

/// Exact per-node statistics `S = XᵀX`, `z = Xᵀy` and optionally `u = yᵀy`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub s: SymMatrix,
    pub z: DVector<f64>,
    pub u: Option<f64>,
    pub n_rows: usize,
}

impl SummaryStats {
    pub fn dim(&self) -> usize {
        self.z.len()
    }

    /// Element-wise sum of several nodes' statistics.
    pub fn sum(parts: &[SummaryStats]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("cannot sum zero statistics"));
        };
        let mut acc = first.clone();
        for p in &parts[1..] {
            if p.dim() != acc.dim() {
                return Err(Error::dims("statistics have different dimensions"));
            }
            acc.s = acc.s.add(&p.s)?;
            acc.z += &p.z;
            acc.u = match (acc.u, p.u) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            };
            acc.n_rows += p.n_rows;
        }
        Ok(acc)
    }
}

pub fn summarize(data: &Dataset, include_u: bool) -> SummaryStats {
    let gram = data.x.tr_mul(&data.x);
    let s = SymMatrix::from_upper(&gram).expect("Gram matrix is square");
    let z = data.x.tr_mul(&data.y);
    let u = include_u.then(|| data.y.dot(&data.y));
    SummaryStats { s, z, u, n_rows: data.n_rows() }
}

/// Hyperparameters of the hierarchical model: `θ ~ N(m, C)`,
/// `σ_y² ~ IG(a, b)` and `Σ_x ~ IW(Λ, κ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    pub m: DVector<f64>,
    pub c: PsdMatrix,
    pub a: f64,
    pub b: f64,
    pub lambda: PsdMatrix,
    pub kappa: f64,
}

impl Priors {
    pub fn new(m: DVector<f64>, c: PsdMatrix, a: f64, b: f64, lambda: PsdMatrix, kappa: f64) -> Result<Self> {
        let p = Self { m, c, a, b, lambda, kappa };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.m.len();
        if self.c.dim() != d || self.lambda.dim() != d {
            return Err(Error::dims("prior mean, C and Λ must share the same dimension"));
        }
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(Error::invalid(format!("IG prior needs a, b > 0, got ({}, {})", self.a, self.b)));
        }
        if !(self.kappa > d as f64 - 1.0) {
            return Err(Error::invalid(format!("κ must exceed d - 1, got {}", self.kappa)));
        }
        if nalgebra::Cholesky::new(self.c.as_matrix().clone()).is_none() {
            return Err(Error::invalid("prior covariance C must be positive definite"));
        }
        if nalgebra::Cholesky::new(self.lambda.as_matrix().clone()).is_none() {
            return Err(Error::invalid("Λ must be positive definite"));
        }
        Ok(())
    }

    /// The experimental setup: `a = 20`, `b = 0.5`, `m = 0`,
    /// `C = b/(a−1) I` and `κ = d + 1`, with the given `Λ`.
    pub fn experiment_default(lambda: PsdMatrix) -> Self {
        let d = lambda.dim();
        let (a, b) = (20.0, 0.5);
        Self {
            m: DVector::zeros(d),
            c: PsdMatrix::scaled_identity(d, b / (a - 1.0)).expect("positive factor"),
            a,
            b,
            lambda,
            kappa: d as f64 + 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Prior mean of `σ_y²`, or `b` when `a ≤ 1`.
    pub fn sigma_y2_mean(&self) -> f64 {
        if self.a > 1.0 {
            self.b / (self.a - 1.0)
        } else {
            self.b
        }
    }

    pub fn c_inv(&self) -> DMatrix<f64> {
        nalgebra::Cholesky::new(self.c.as_matrix().clone())
            .expect("validated positive definite")
            .inverse()
    }
}

/// Parameters used to generate a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub theta: DVector<f64>,
    pub sigma_y2: f64,
    pub sigma_x: PsdMatrix,
}

/// `VᵀV` with `V` a `d × d` matrix of i.i.d. standard normals.
pub fn random_scale_matrix<R: Rng + ?Sized>(d: usize, rng: &mut R) -> PsdMatrix {
    let v = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m = SymMatrix::from_upper(&v.tr_mul(&v)).expect("square");
    PsdMatrix::new(m).expect("Gram matrices are PSD")
}

/// Simulated regression data: `θ ~ N(0, I)`, `Σ_x ~ IW(Λ, κ)`,
/// `x_i ~ N(0, Σ_x)` and unit noise variance.
pub fn simulate_data<R: Rng + ?Sized>(n: usize, d: usize, priors: &Priors, rng: &mut R) -> Result<(Dataset, GroundTruth)> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("n and d must be at least 1"));
    }
    if priors.dim() != d {
        return Err(Error::dims(format!("priors have dimension {} but d = {d}", priors.dim())));
    }
    let sigma_x = sample_inv_wishart(priors.lambda.as_matrix(), priors.kappa, rng)?;
    let sigma_x = PsdMatrix::new(sigma_x)?;
    let theta = standard_normal_vector(d, rng);
    let truth = GroundTruth { theta, sigma_y2: 1.0, sigma_x };
    let data = simulate_from_truth(n, &truth, rng)?;
    Ok((data, truth))
}

/// Fresh rows from a known ground truth (used for held-out test sets).
pub fn simulate_from_truth<R: Rng + ?Sized>(n: usize, truth: &GroundTruth, rng: &mut R) -> Result<Dataset> {
    let d = truth.theta.len();
    let (chol, _) = crate::linalg::cholesky_jittered(truth.sigma_x.as_matrix())?;
    let l = chol.l();
    let noise_sd = truth.sigma_y2.sqrt();
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let xi = &l * standard_normal_vector(d, rng);
        y[i] = xi.dot(&truth.theta) + noise_sd * rng.sample::<f64, _>(StandardNormal);
        x.row_mut(i).copy_from(&xi.transpose());
    }
    Dataset::new(x, y)
}

/// Largest row L2 norm and largest absolute response.
pub fn compute_bounds(data: &Dataset) -> DataBounds {
    let x_norm = data.x.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let y_norm = data.y.iter().map(|v| v.abs()).fold(0.0, f64::max);
    DataBounds { x_norm, y_norm }
}

fn standardize_column(col: &mut [f64]) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in col.iter_mut() {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Centres every feature column and the response and scales them to unit
/// (population) standard deviation. Constant columns become zero.
pub fn preprocess(data: &Dataset) -> Result<Dataset> {
    if data.n_rows() < 2 {
        return Err(Error::invalid("preprocessing needs at least two rows"));
    }
    let mut x = data.x.clone();
    for mut col in x.column_iter_mut() {
        standardize_column(col.as_mut_slice());
    }
    let mut y = data.y.clone();
    standardize_column(y.as_mut_slice());
    Dataset::new(x, y)
}

fn max_abs_column(col: &mut [f64]) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    for v in col.iter_mut() {
        *v -= mean;
    }
    let scale = col.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    for v in col.iter_mut() {
        *v = if scale > 0.0 { *v / scale } else { 0.0 };
    }
}

/// Centres every column and the response, then divides each by its largest
/// absolute value so all entries lie in `[-1, 1]`.
pub fn normalize_max_abs(data: &Dataset) -> Result<Dataset> {
    if data.n_rows() < 2 {
        return Err(Error::invalid("normalisation needs at least two rows"));
    }
    let mut x = data.x.clone();
    for mut col in x.column_iter_mut() {
        max_abs_column(col.as_mut_slice());
    }
    let mut y = data.y.clone();
    max_abs_column(y.as_mut_slice());
    Dataset::new(x, y)
}

/// How raw real-world data are rescaled before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Leave the data as they are.
    None,
    /// [`preprocess`]: zero mean, unit standard deviation.
    Standardize,
    /// [`normalize_max_abs`]: zero mean, largest magnitude one.
    #[default]
    MaxAbs,
}

impl Normalization {
    pub fn apply(self, data: &Dataset) -> Result<Dataset> {
        match self {
            Normalization::None => Ok(data.clone()),
            Normalization::Standardize => preprocess(data),
            Normalization::MaxAbs => normalize_max_abs(data),
        }
    }
}

/// Splits the rows into `j` disjoint shards of sizes differing by at most
/// one, after a seeded shuffle.
pub fn partition<R: Rng + ?Sized>(data: &Dataset, j: usize, rng: &mut R) -> Result<Vec<Dataset>> {
    let n = data.n_rows();
    if j == 0 {
        return Err(Error::invalid("number of nodes J must be at least 1"));
    }
    if j > n {
        return Err(Error::invalid(format!("cannot split {n} rows among {j} nodes")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let base = n / j;
    let extra = n % j;
    let mut shards = Vec::with_capacity(j);
    let mut start = 0;
    for k in 0..j {
        let size = base + usize::from(k < extra);
        shards.push(data.select_rows(&order[start..start + size])?);
        start += size;
    }
    Ok(shards)
}

/// Seeded random split into `(train, test)` with `test_fraction` of the rows held out.
pub fn train_test_split<R: Rng + ?Sized>(data: &Dataset, test_fraction: f64, rng: &mut R) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n = data.n_rows();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::invalid(format!("cannot hold out {n_test} of {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let test = data.select_rows(&order[..n_test])?;
    let train = data.select_rows(&order[n_test..])?;
    Ok((train, test))
}

/// Replaces each block of `k` consecutive rows by their sum divided by `√k`,
/// i.e. applies `A` with `A Aᵀ = I` to both `X` and `y`.
pub fn average_transform(data: &Dataset, k: usize) -> Result<Dataset> {
    let n = data.n_rows();
    if k == 0 || !n.is_multiple_of(k) {
        return Err(Error::invalid(format!("block size {k} does not divide n = {n}")));
    }
    let m = n / k;
    let scale = 1.0 / (k as f64).sqrt();
    let d = data.dim();
    let mut x = DMatrix::zeros(m, d);
    let mut y = DVector::zeros(m);
    for i in 0..m {
        let rows = data.x.rows(i * k, k);
        for c in 0..d {
            x[(i, c)] = rows.column(c).sum() * scale;
        }
        y[i] = data.y.rows(i * k, k).sum() * scale;
    }
    Dataset::new(x, y)
}

/// Statistics of the design matrix augmented with a leading column of ones.
#[derive(Debug, Clone, PartialEq)]
pub struct InterceptStats {
    /// `[n, n x̄ᵀ; n x̄, S]`.
    pub s0: SymMatrix,
    /// `[Σ yᵢ; Xᵀy]`.
    pub z0: DVector<f64>,
    pub xbar: DVector<f64>,
    /// Sample covariance of the rows (denominator `n − 1`).
    pub sigma_hat: SymMatrix,
}

pub fn intercept_stats(data: &Dataset) -> Result<InterceptStats> {
    let n = data.n_rows();
    if n < 2 {
        return Err(Error::invalid("intercept statistics need at least two rows"));
    }
    let d = data.dim();
    let nf = n as f64;
    let stats = summarize(data, false);
    let col_sums = DVector::from_iterator(d, data.x.column_iter().map(|c| c.sum()));
    let xbar = &col_sums / nf;
    let centred = DMatrix::from_fn(n, d, |i, c| data.x[(i, c)] - xbar[c]);
    let sigma_hat = SymMatrix::from_upper(&(centred.tr_mul(&centred) / (nf - 1.0)))?;

    let mut s0 = DMatrix::zeros(d + 1, d + 1);
    s0[(0, 0)] = nf;
    for c in 0..d {
        s0[(0, c + 1)] = col_sums[c];
        s0[(c + 1, 0)] = col_sums[c];
    }
    s0.view_mut((1, 1), (d, d)).copy_from(stats.s.as_matrix());
    let mut z0 = DVector::zeros(d + 1);
    z0[0] = data.y.sum();
    z0.rows_mut(1, d).copy_from(&stats.z);
    Ok(InterceptStats { s0: SymMatrix::from_upper(&s0)?, z0, xbar, sigma_hat })
}

/// Design matrix with a leading column of ones.
pub fn augment_with_ones(data: &Dataset) -> Result<Dataset> {
    let x = data.x.clone().insert_column(0, 1.0);
    Dataset::new(x, data.y.clone())
}

/// Loads a numeric CSV file whose last column is the response. A first row
/// that does not parse as numbers is treated as a header.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> = record.iter().map(|f| f.parse::<f64>()).collect();
        if line == 0 && parsed.iter().any(|p| p.is_err())
            && parsed.iter().all(|p| p.is_err()) {
                continue;
            }
        let mut row = Vec::with_capacity(parsed.len());
        for (col, p) in parsed.into_iter().enumerate() {
            match p {
                Ok(v) => row.push(v),
                Err(_) => {
                    return Err(Error::Data(format!(
                        "{}: non-numeric value {:?} at line {}, column {}",
                        path.display(),
                        &record[col],
                        line + 1,
                        col + 1
                    )))
                }
            }
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Data(format!(
                    "{}: line {} has {} fields, expected {w}",
                    path.display(),
                    line + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        rows.push(row);
    }
    let width = width.ok_or_else(|| Error::Data(format!("{}: no data rows", path.display())))?;
    if width < 2 {
        return Err(Error::Data(format!("{}: need at least one feature column and a response", path.display())));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, width - 1, |i, c| rows[i][c]);
    let y = DVector::from_iterator(n, rows.iter().map(|r| r[width - 1]));
    Dataset::new(x, y).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

//! Library routines checked against independent implementations: a Jacobi
//! eigen-solver, closed-form densities and Kolmogorov–Smirnov tests.

use dp_linreg::dist::{ln_inv_gamma, ln_wishart, sample_inv_gamma, sample_mvn, sample_wishart};
use dp_linreg::linalg::{nearest_psd, SymMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cyclic Jacobi rotations; returns eigenvalues and eigenvectors (columns).
fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::identity(n, n);
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut r = DMatrix::identity(n, n);
                r[(p, p)] = c;
                r[(q, q)] = c;
                r[(p, q)] = s;
                r[(q, p)] = -s;
                a = r.transpose() * &a * &r;
                v = &v * &r;
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

fn random_symmetric(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    (&m + m.transpose()) * 0.5
}

#[test]
fn nearest_psd_matches_jacobi_clipping() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for d in [2, 3, 5] {
        for _ in 0..20 {
            let a = random_symmetric(d, &mut rng);
            let (vals, vecs) = jacobi_eigen(&a);
            let clipped = DMatrix::from_diagonal(&DVector::from_iterator(d, vals.iter().map(|v| v.max(0.0))));
            let oracle = &vecs * clipped * vecs.transpose();
            let got = nearest_psd(&SymMatrix::symmetrize(&a).unwrap()).unwrap();
            assert!((got.as_matrix() - &oracle).norm() < 1e-9, "d = {d}");
        }
    }
}

/// `log W(x; s, ν)` for `d = 2` written out from the density definition.
fn wishart2_oracle(x: &DMatrix<f64>, s: &DMatrix<f64>, nu: f64) -> f64 {
    let det = |m: &DMatrix<f64>| m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let s_inv = DMatrix::from_row_slice(2, 2, &[s[(1, 1)], -s[(0, 1)], -s[(1, 0)], s[(0, 0)]]) / det(s);
    let tr = (s_inv * x).trace();
    let ln_gamma2 = 0.5 * std::f64::consts::PI.ln() + libm::lgamma(nu / 2.0) + libm::lgamma(nu / 2.0 - 0.5);
    0.5 * (nu - 3.0) * det(x).ln() - 0.5 * tr - nu * std::f64::consts::LN_2 - 0.5 * nu * det(s).ln() - ln_gamma2
}

#[test]
fn wishart_density_matches_written_out_formula() {
    let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.7]);
    let x = DMatrix::from_row_slice(2, 2, &[5.0, -1.0, -1.0, 3.0]);
    for nu in [2.5, 4.0, 30.0] {
        assert!((ln_wishart(&x, &s, nu) - wishart2_oracle(&x, &s, nu)).abs() < 1e-10);
    }
    // d = 1 reduces to a Gamma(ν/2, 2s) density.
    let (xv, sv, nu) = (3.0, 1.5, 5.0);
    let gamma = (nu / 2.0 - 1.0) * f64::ln(xv) - xv / (2.0 * sv) - (nu / 2.0) * f64::ln(2.0 * sv) - libm::lgamma(nu / 2.0);
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    assert!((ln_wishart(&one(xv), &one(sv), nu) - gamma).abs() < 1e-12);
}

#[test]
fn inverse_gamma_density_matches_formula() {
    let (x, a, b) = (0.4, 3.5, 1.2);
    let oracle = a * f64::ln(b) - libm::lgamma(a) - (a + 1.0) * f64::ln(x) - b / x;
    assert!((ln_inv_gamma(x, a, b) - oracle).abs() < 1e-12);
}

/// Largest gap between the empirical CDF of `draws` and `cdf`.
fn ks_statistic(mut draws: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

// Critical value at p = 0.001 is about 1.95/√n.
const N_KS: usize = 20_000;
fn ks_critical() -> f64 {
    1.95 / (N_KS as f64).sqrt()
}

#[test]
fn normal_draws_pass_ks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cov = SymMatrix::from_diagonal(&[2.5]);
    let mean = DVector::from_element(1, -1.0);
    let draws: Vec<f64> = (0..N_KS).map(|_| sample_mvn(&mean, &cov, &mut rng)[0]).collect();
    let cdf = |x: f64| 0.5 * libm::erfc(-(x + 1.0) / (2.5f64.sqrt() * std::f64::consts::SQRT_2));
    assert!(ks_statistic(draws, cdf) < ks_critical());
}

#[test]
fn inverse_gamma_draws_pass_ks() {
    // 1/X ~ Gamma(3, rate 2), whose CDF has a closed form for integer shape.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws: Vec<f64> = (0..N_KS).map(|_| sample_inv_gamma(3.0, 2.0, &mut rng)).collect();
    let cdf = |t: f64| {
        let y = 2.0 / t;
        (-y).exp() * (1.0 + y + y * y / 2.0)
    };
    assert!(ks_statistic(draws, cdf) < ks_critical());
}

#[test]
fn one_dimensional_wishart_draws_pass_ks() {
    // W(s, 4) in one dimension is s·χ²₄.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = 0.8;
    let scale = DMatrix::from_element(1, 1, s);
    let draws: Vec<f64> = (0..N_KS).map(|_| sample_wishart(&scale, 4.0, &mut rng).unwrap().get(0, 0)).collect();
    let cdf = |x: f64| {
        let h = x / s / 2.0;
        1.0 - (-h).exp() * (1.0 + h)
    };
    assert!(ks_statistic(draws, cdf) < ks_critical());
}

#[test]
fn wishart_draws_have_the_right_moments() {
    // E[W] = νS and Var(W_ij) = ν(S_ij² + S_ii S_jj).
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]);
    let nu = 6.0;
    let k = 40_000;
    let draws: Vec<SymMatrix> = (0..k).map(|_| sample_wishart(&s, nu, &mut rng).unwrap()).collect();
    for (i, j) in [(0, 0), (0, 1), (1, 1)] {
        let mean = draws.iter().map(|w| w.get(i, j)).sum::<f64>() / k as f64;
        let var = nu * (s[(i, j)].powi(2) + s[(i, i)] * s[(j, j)]);
        let se = (var / k as f64).sqrt();
        assert!((mean - nu * s[(i, j)]).abs() < 4.0 * se, "entry ({i},{j})");
    }
}

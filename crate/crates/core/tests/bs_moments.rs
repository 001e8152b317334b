//! Monte Carlo check of the exact per-row moments used by the B&S sampler.

use dp_linreg::baselines::{bs_ss_moments, ss_dim};
use dp_linreg::dist::sample_mvn;
use dp_linreg::linalg::{PsdMatrix, SymMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn row_moments_match_simulation_in_two_dimensions() {
    let theta = DVector::from_vec(vec![0.7, -1.2]);
    let sigma_y2 = 0.5;
    let sx = SymMatrix::from_upper(&DMatrix::from_row_slice(2, 2, &[1.5, 0.6, 0.6, 0.8])).unwrap();
    let (mean, cov) = bs_ss_moments(&theta, sigma_y2, &PsdMatrix::new(sx.clone()).unwrap()).unwrap();
    assert_eq!(mean.len(), ss_dim(2));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let k = 200_000;
    let zero = DVector::zeros(2);
    let rows: Vec<DVector<f64>> = (0..k)
        .map(|_| {
            let x = sample_mvn(&zero, &sx, &mut rng);
            let y = x.dot(&theta) + sigma_y2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            DVector::from_vec(vec![x[0] * x[0], x[0] * x[1], x[1] * x[0], x[1] * x[1], x[0] * y, x[1] * y, y * y])
        })
        .collect();
    let emp_mean = rows.iter().fold(DVector::zeros(7), |a, r| a + r) / k as f64;
    let emp_cov = rows.iter().fold(DMatrix::zeros(7, 7), |a, r| {
        let c = r - &emp_mean;
        a + &c * c.transpose()
    }) / (k - 1) as f64;

    for i in 0..7 {
        let se = (cov.get(i, i) / k as f64).sqrt();
        assert!((emp_mean[i] - mean[i]).abs() < 5.0 * se, "mean entry {i}: {} vs {}", emp_mean[i], mean[i]);
    }
    let rel = (&emp_cov - cov.as_matrix()).norm() / cov.as_matrix().norm();
    assert!(rel < 0.05, "covariance relative error {rel}");
}

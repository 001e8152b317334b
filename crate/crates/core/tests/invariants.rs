//! Property-based checks of structural invariants.

use dp_linreg::harness::{node_emit, read_ndjson, write_ndjson, EmitOptions};
use dp_linreg::linalg::{nearest_psd, SymMatrix};
use dp_linreg::model::{compute_bounds, partition, Dataset};
use dp_linreg::privacy::{analytic_gaussian_sigma, privacy_curve_delta, PrivacyBudget};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn symmetric(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-50.0..50.0f64, d * d).prop_map(move |v| {
        let m = DMatrix::from_vec(d, d, v);
        (&m + m.transpose()) * 0.5
    })
}

fn dataset() -> impl Strategy<Value = Dataset> {
    (2usize..4, 5usize..60).prop_flat_map(|(d, n)| {
        proptest::collection::vec(-3.0..3.0f64, n * (d + 1)).prop_map(move |v| {
            let x = DMatrix::from_fn(n, d, |i, j| v[i * (d + 1) + j]);
            let y = DVector::from_fn(n, |i, _| v[i * (d + 1) + d]);
            Dataset::new(x, y).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_psd_idempotent_and_no_farther_than_zero(m in (1usize..6).prop_flat_map(symmetric)) {
        let a = SymMatrix::symmetrize(&m).unwrap();
        let p = nearest_psd(&a).unwrap();
        prop_assert!(p.as_sym().eigen().eigenvalues.min() >= -1e-9);
        let again = nearest_psd(p.as_sym()).unwrap();
        prop_assert!((again.as_matrix() - p.as_matrix()).norm() <= 1e-8 * (1.0 + p.as_matrix().norm()));
        // The zero matrix is PSD, so the projection can be no farther away.
        prop_assert!(a.frobenius_distance(p.as_sym()) <= m.norm() + 1e-9);
    }

    #[test]
    fn upper_triangle_round_trips(m in (1usize..6).prop_flat_map(symmetric)) {
        let a = SymMatrix::symmetrize(&m).unwrap();
        let back = SymMatrix::from_upper_triangle(a.dim(), &a.upper_triangle()).unwrap();
        prop_assert_eq!(a, back);
    }

    #[test]
    fn partition_is_a_balanced_permutation(data in dataset(), j in 1usize..6, seed in any::<u64>()) {
        let shards = partition(&data, j, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(shards.len(), j);
        let sizes: Vec<usize> = shards.iter().map(Dataset::n_rows).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), data.n_rows());
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut ys: Vec<f64> = shards.iter().flat_map(|s| s.y().iter().copied()).collect();
        let mut orig: Vec<f64> = data.y().iter().copied().collect();
        ys.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        prop_assert_eq!(ys, orig);
    }

    #[test]
    fn noise_scale_meets_the_budget_and_shrinks_with_epsilon(eps in 0.05..20.0f64, log_delta in -12.0..-3.0f64) {
        let delta = 10f64.powf(log_delta);
        let sigma = analytic_gaussian_sigma(&PrivacyBudget::new(eps, delta).unwrap()).unwrap();
        prop_assert!(privacy_curve_delta(eps, sigma) <= delta * (1.0 + 1e-6));
        let looser = analytic_gaussian_sigma(&PrivacyBudget::new(eps * 1.5, delta).unwrap()).unwrap();
        prop_assert!(looser < sigma);
    }

    #[test]
    fn node_messages_round_trip_through_ndjson(data in dataset(), seed in any::<u64>(), include_u in any::<bool>()) {
        let bounds = compute_bounds(&data);
        let budget = PrivacyBudget::new(1.0, 1e-6).unwrap();
        let opts = EmitOptions { include_u, ..EmitOptions::default() };
        let msg = node_emit("n", &data, &bounds, &budget, opts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut buf = Vec::new();
        write_ndjson(std::slice::from_ref(&msg), &mut buf).unwrap();
        let back = read_ndjson(buf.as_slice()).unwrap();
        prop_assert_eq!(back, vec![msg]);
    }
}

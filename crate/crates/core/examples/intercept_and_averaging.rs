//! Two data transforms: an intercept column whose statistics are built from
//! column sums, and block averaging, which keeps `XᵀX` and `Xᵀy` in
//! expectation while shrinking the row count.

use dp_linreg::model::{augment_with_ones, average_transform, intercept_stats, summarize, Dataset};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> dp_linreg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 1_200;
    let x = DMatrix::from_fn(n, 2, |_, _| 2.0 + rng.sample::<f64, _>(StandardNormal));
    let y = DVector::from_fn(n, |i, _| 1.5 + 0.5 * x[(i, 0)] - x[(i, 1)] + 0.3 * rng.sample::<f64, _>(StandardNormal));
    let data = Dataset::new(x, y)?;

    let aug = intercept_stats(&data)?;
    let direct = summarize(&augment_with_ones(&data)?, false);
    println!("augmented Gram matrix matches: {}", aug.s0.frobenius_distance(&direct.s) < 1e-8);
    let beta = aug.s0.as_matrix().clone().lu().solve(&aug.z0).expect("full rank");
    println!("intercept and slopes {:?}", beta.as_slice());
    println!("feature means {:?}", aug.xbar.as_slice());

    for k in [1, 4, 16] {
        let avg = average_transform(&data, k)?;
        let s = summarize(&avg, false);
        let b = s.s.as_matrix().clone().lu().solve(&s.z).expect("full rank");
        println!("k = {k:>2}: {:>4} rows, slopes without intercept {:?}", avg.n_rows(), b.as_slice());
    }
    Ok(())
}

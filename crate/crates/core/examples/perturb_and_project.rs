//! One node perturbs its Gram matrix; the receiver projects it back onto the
//! positive semidefinite cone.

use dp_linreg::linalg::nearest_psd;
use dp_linreg::model::{compute_bounds, random_scale_matrix, simulate_data, summarize, Priors};
use dp_linreg::privacy::{perturb_stats, NoiseCalibration, PrivacyBudget};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dp_linreg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let priors = Priors::experiment_default(random_scale_matrix(3, &mut rng));
    let (data, _) = simulate_data(200, 3, &priors, &mut rng)?;
    let bounds = compute_bounds(&data);
    let stats = summarize(&data, false);

    for eps in [10.0, 1.0, 0.1] {
        let calib = NoiseCalibration::new(&PrivacyBudget::new(eps, 1e-6)?, &bounds)?;
        let noisy = perturb_stats(&stats, &calib, &mut rng, false)?;
        let raw_min = noisy.s_hat.eigen().eigenvalues.min();
        let projected = nearest_psd(&noisy.s_hat)?;
        let err_raw = noisy.s_hat.frobenius_distance(&stats.s);
        let err_proj = projected.as_sym().frobenius_distance(&stats.s);
        println!(
            "eps {eps:>4}: noise std {:>8.2}, smallest eigenvalue of Ŝ {raw_min:>9.2}, error {err_raw:>8.2} -> {err_proj:>8.2} after projection",
            calib.sigma_s
        );
    }
    Ok(())
}

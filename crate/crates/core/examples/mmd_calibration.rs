//! How far the private posterior is from the non-private one, measured by
//! the unbiased MMD² with a median-heuristic Gaussian kernel.

use dp_linreg::metrics::{mmd2_median, nonprivate_posterior, sample_posterior};
use dp_linreg::model::{compute_bounds, random_scale_matrix, simulate_data, summarize, Priors};
use dp_linreg::privacy::{perturb_stats, NoiseCalibration, PrivacyBudget};
use dp_linreg::samplers::{bayes_fixeds_fast, default_sigma_y2_tilde};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dp_linreg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let priors = Priors::experiment_default(random_scale_matrix(2, &mut rng));
    let (data, truth) = simulate_data(5_000, 2, &priors, &mut rng)?;
    let bounds = compute_bounds(&data);
    let stats = summarize(&data, false);
    let reference = nonprivate_posterior(&stats, truth.sigma_y2, &priors)?;

    for eps in [0.1, 1.0, 10.0, 100.0] {
        let mut total = 0.0;
        let runs = 10;
        for _ in 0..runs {
            let calib = NoiseCalibration::new(&PrivacyBudget::new(eps, 1e-8)?, &bounds)?;
            let noisy = perturb_stats(&stats, &calib, &mut rng, false)?;
            let post = bayes_fixeds_fast(&[noisy], &priors, default_sigma_y2_tilde(bounds.y_norm))?;
            let p = sample_posterior(&post, 200, &mut rng);
            let q = sample_posterior(&reference, 200, &mut rng);
            total += mmd2_median(&p, &q)?;
        }
        println!("eps {eps:>5}: mean MMD² {:.4}", total / runs as f64);
    }
    Ok(())
}

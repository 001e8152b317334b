//! Closed-form Gaussian posterior from noisy statistics of several nodes,
//! compared with the non-private posterior.

use dp_linreg::metrics::nonprivate_posterior;
use dp_linreg::model::{compute_bounds, partition, random_scale_matrix, simulate_data, summarize, Priors};
use dp_linreg::privacy::{perturb_stats, NoiseCalibration, PrivacyBudget};
use dp_linreg::samplers::{bayes_fixeds_fast, default_sigma_y2_tilde};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dp_linreg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let priors = Priors::experiment_default(random_scale_matrix(2, &mut rng));
    let (data, truth) = simulate_data(10_000, 2, &priors, &mut rng)?;
    let bounds = compute_bounds(&data);
    let exact = nonprivate_posterior(&summarize(&data, false), truth.sigma_y2, &priors)?;
    println!("true θ           {:?}", truth.theta.as_slice());
    println!("non-private mean {:?}", exact.mean.as_slice());

    let shards = partition(&data, 5, &mut rng)?;
    for eps in [0.5, 2.0, 10.0] {
        let calib = NoiseCalibration::new(&PrivacyBudget::new(eps, 1e-8)?, &bounds)?;
        let nodes = shards
            .iter()
            .map(|s| perturb_stats(&summarize(s, false), &calib, &mut rng, false))
            .collect::<dp_linreg::Result<Vec<_>>>()?;
        let post = bayes_fixeds_fast(&nodes, &priors, default_sigma_y2_tilde(bounds.y_norm))?;
        let sd: Vec<f64> = post.cov.as_matrix().diagonal().iter().map(|v| v.sqrt()).collect();
        println!("eps {eps:>4}: mean {:?}, sd {sd:?}", post.mean.as_slice());
    }
    Ok(())
}

//! The two comparison methods: adaSSP's regularised point estimate, and the
//! sampler that also perturbs `yᵀy` and treats the statistics as normal.

use dp_linreg::baselines::{adassp_estimate, run_mcmc_bs, AdaSspConfig, ExtendedNoisyStats};
use dp_linreg::metrics::mse_estimation;
use dp_linreg::model::{compute_bounds, partition, random_scale_matrix, simulate_data, summarize, Priors};
use dp_linreg::privacy::{perturb_stats, NoiseCalibration, PrivacyBudget};
use dp_linreg::samplers::McmcConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dp_linreg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let priors = Priors::experiment_default(random_scale_matrix(2, &mut rng));
    let (data, truth) = simulate_data(10_000, 2, &priors, &mut rng)?;
    let bounds = compute_bounds(&data);
    let shards = partition(&data, 5, &mut rng)?;

    for eps in [0.5, 5.0] {
        let budget = PrivacyBudget::new(eps, 1e-8)?;
        let theta_ada = adassp_estimate(&shards, &bounds, &AdaSspConfig::new(budget), &mut rng)?;

        let calib = NoiseCalibration::extended(&budget, &bounds)?;
        let ext = shards
            .iter()
            .map(|s| ExtendedNoisyStats::try_from(&perturb_stats(&summarize(s, true), &calib, &mut rng, true)?))
            .collect::<dp_linreg::Result<Vec<_>>>()?;
        let trace = run_mcmc_bs(&ext, &priors, &McmcConfig::with_iterations(1_000), &mut rng)?;
        let theta_bs = trace.posterior_mean();

        println!(
            "eps {eps:>3}: adaSSP {:?} (MSE {:.3e}), B&S {:?} (MSE {:.3e})",
            theta_ada.as_slice(),
            mse_estimation(&theta_ada, &truth.theta)?,
            theta_bs.as_slice(),
            mse_estimation(&theta_bs, &truth.theta)?
        );
    }
    println!("true θ {:?}", truth.theta.as_slice());
    Ok(())
}

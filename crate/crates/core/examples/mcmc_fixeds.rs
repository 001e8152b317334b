//! MCMC with the Gram matrices fixed at their projected noisy values; the
//! chain samples θ and the noise variance.

use dp_linreg::model::{compute_bounds, partition, random_scale_matrix, simulate_data, summarize, Priors};
use dp_linreg::privacy::{perturb_stats, NoiseCalibration, PrivacyBudget};
use dp_linreg::samplers::{run_mcmc_fixeds, McmcConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dp_linreg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let priors = Priors::experiment_default(random_scale_matrix(2, &mut rng));
    let (data, truth) = simulate_data(10_000, 2, &priors, &mut rng)?;
    let bounds = compute_bounds(&data);
    let calib = NoiseCalibration::new(&PrivacyBudget::new(1.0, 1e-8)?, &bounds)?;
    let nodes = partition(&data, 5, &mut rng)?
        .iter()
        .map(|s| perturb_stats(&summarize(s, false), &calib, &mut rng, false))
        .collect::<dp_linreg::Result<Vec<_>>>()?;

    let trace = run_mcmc_fixeds(&nodes, &priors, &McmcConfig::with_iterations(5_000), &mut rng)?;
    let s = trace.summary();
    println!("true θ {:?}", truth.theta.as_slice());
    println!("{}", serde_json::to_string_pretty(&s).expect("summary serialises"));
    Ok(())
}

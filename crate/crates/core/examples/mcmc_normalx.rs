//! Full sampler that also infers the feature covariance and each node's
//! Gram matrix. Writes the θ trace to `normalx_trace.csv` when a path is given.

use std::fs::File;

use dp_linreg::model::{compute_bounds, partition, random_scale_matrix, simulate_data, summarize, Priors};
use dp_linreg::privacy::{perturb_stats, NoiseCalibration, PrivacyBudget};
use dp_linreg::samplers::{run_mcmc_normalx, McmcConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dp_linreg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let priors = Priors::experiment_default(random_scale_matrix(2, &mut rng));
    let (data, truth) = simulate_data(10_000, 2, &priors, &mut rng)?;
    let bounds = compute_bounds(&data);
    let calib = NoiseCalibration::new(&PrivacyBudget::new(2.0, 1e-8)?, &bounds)?;
    let nodes = partition(&data, 2, &mut rng)?
        .iter()
        .map(|s| perturb_stats(&summarize(s, false), &calib, &mut rng, false))
        .collect::<dp_linreg::Result<Vec<_>>>()?;

    let config = McmcConfig { record_sigma_x: true, ..McmcConfig::with_iterations(5_000) };
    let trace = run_mcmc_normalx(&nodes, &priors, &config, &mut rng)?;
    let kept = &trace.sigma_x.as_ref().expect("recorded")[trace.burn_in..];
    let mut sx = kept[0].as_matrix() * 0.0;
    for m in kept {
        sx += m.as_matrix();
    }
    sx /= kept.len() as f64;

    println!("true θ {:?}, posterior mean {:?}", truth.theta.as_slice(), trace.posterior_mean().as_slice());
    println!("true Σ_x {:?}", truth.sigma_x.as_matrix().as_slice());
    println!("mean Σ_x {:?}", sx.as_slice());
    println!("S acceptance {:?}, σ_y² acceptance {:?}", trace.s_acceptance, trace.sigma_y2_acceptance);

    if let Some(path) = std::env::args().nth(1) {
        trace.write_csv(File::create(&path)?)?;
        println!("trace written to {path}");
    }
    Ok(())
}

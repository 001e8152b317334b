//! A small grid over node counts and budgets, summarised with 90% intervals.
//! Pass a TOML config path to run that instead.

use dp_linreg::harness::{run_experiment, ExperimentConfig, Method};
use dp_linreg::metrics::summarize_reports;

fn main() -> dp_linreg::Result<()> {
    let config = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => ExperimentConfig {
            n: 4_000,
            nodes: vec![1, 5],
            epsilons: vec![0.5, 5.0],
            methods: vec![Method::BayesFixedSFast, Method::McmcFixedS, Method::AdaSsp, Method::NonPrivate],
            iterations: 1_000,
            repeats: 5,
            seed: 1,
            ..ExperimentConfig::default()
        },
    };
    let outcome = run_experiment(&config)?;
    for f in &outcome.failures {
        eprintln!("failed: {f:?}");
    }
    println!("{:<18} {:>3} {:>5} {:>12} {:>24}", "method", "J", "eps", "pred. MSE", "90% interval");
    for row in summarize_reports(&outcome.reports) {
        let m = &row.mse_prediction;
        println!(
            "{:<18} {:>3} {:>5} {:>12.4} {:>24}",
            row.method,
            row.nodes,
            row.epsilon,
            m.mean,
            format!("[{:.4}, {:.4}]", m.lo, m.hi)
        );
    }
    Ok(())
}

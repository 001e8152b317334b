//! The wire protocol: each node emits one NDJSON message, the aggregator
//! reads and validates the set. Only noisy statistics cross the boundary.

use dp_linreg::harness::{aggregate, node_emit, read_ndjson, write_ndjson, EmitOptions};
use dp_linreg::model::{compute_bounds, partition, random_scale_matrix, simulate_data, Priors};
use dp_linreg::privacy::PrivacyBudget;
use dp_linreg::samplers::{bayes_fixeds_fast, default_sigma_y2_tilde};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dp_linreg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let priors = Priors::experiment_default(random_scale_matrix(2, &mut rng));
    let (data, truth) = simulate_data(6_000, 2, &priors, &mut rng)?;
    // The bounds are public: agreed before any node looks at its data.
    let bounds = compute_bounds(&data);
    let budget = PrivacyBudget::new(1.0, 1e-8)?;

    let messages = partition(&data, 3, &mut rng)?
        .iter()
        .enumerate()
        .map(|(k, shard)| node_emit(format!("hospital-{k}"), shard, &bounds, &budget, EmitOptions::default(), &mut rng))
        .collect::<dp_linreg::Result<Vec<_>>>()?;

    let mut wire = Vec::new();
    write_ndjson(&messages, &mut wire)?;
    let text = String::from_utf8(wire.clone()).expect("NDJSON is UTF-8");
    for line in text.lines() {
        println!("{}…", &line[..line.len().min(110)]);
    }

    let set = aggregate(read_ndjson(wire.as_slice())?)?;
    println!("\n{} nodes, {} rows in total, d = {}", set.len(), set.n_total(), set.dim());
    let post = bayes_fixeds_fast(&set.noisy_stats()?, &priors, default_sigma_y2_tilde(bounds.y_norm))?;
    println!("posterior mean {:?}, true θ {:?}", post.mean.as_slice(), truth.theta.as_slice());

    let mut tampered = read_ndjson(wire.as_slice())?;
    tampered[2].node_id = tampered[0].node_id.clone();
    match aggregate(tampered) {
        Err(e) => println!("duplicate sender rejected: {e}"),
        Ok(_) => unreachable!("duplicates must be rejected"),
    }
    Ok(())
}

//! Seconds per iteration of the two samplers that update Gram matrices, as
//! the dimension grows.

use dp_linreg::cli::{bench_ratios, run_bench, BenchConfig};

fn main() -> dp_linreg::Result<()> {
    let config = BenchConfig { dims: vec![2, 4, 6, 8], iterations: 100, ..BenchConfig::default() };
    let rows = run_bench(&config)?;
    for r in &rows {
        println!("{:<14} d = {:>2}: {:.3e} s/iter", r.method, r.d, r.seconds_per_iter);
    }
    for (d, ratio) in bench_ratios(&rows) {
        println!("d = {d:>2}: B&S is {ratio:.1}× slower");
    }
    Ok(())
}

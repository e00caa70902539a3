//! Finite-difference check of the full training objective against the
//! autodiff tape, per parameter tensor, on the tiny config.
//!
//! ```text
//! cargo run --release --example grad_check -- [seeds]
//! ```

use gsai::model::{init_params, ModelConfig};
use gsai::train::objective_grad_check;

fn main() -> gsai::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let cfg = ModelConfig::tiny();
    let names: Vec<String> = init_params(&cfg)?.entries().into_iter().map(|(n, _, _)| n).collect();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let report = objective_grad_check(&cfg, 0.1, seed)?;
        println!("seed {seed}: max relative error {:.2e}", report.max_rel_error);
        if seed == 0 {
            for (name, err) in names.iter().zip(&report.per_param) {
                println!("  {name:<18} {err:.2e}");
            }
        }
        worst = worst.max(report.max_rel_error);
    }
    println!("worst over {seeds} seeds: {worst:.2e}");
    Ok(())
}

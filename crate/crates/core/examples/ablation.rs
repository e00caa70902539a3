//! Runs one ablation suite and prints the seed-averaged table.
//!
//! ```text
//! cargo run --release --example ablation -- components --seeds 0,1,2 --steps 2000 --batch 16
//! ```
//!
//! Suites: `components`, `guidance`, `shots`, `tokens`. The CSV table and the
//! long-form plot data are written next to each other under `--out`.

use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;
use gsai::eval::{run_ablation, AblationSuite, EvalSpec, Runner};
use gsai::model::ModelConfig;
use gsai::task::TaskConfig;
use gsai::train::{ConfigSet, TrainConfig};

#[derive(Parser)]
struct Args {
    suite: AblationSuite,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 256)]
    episodes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let base = ConfigSet {
        model: ModelConfig::default(),
        train: TrainConfig {
            steps: args.steps,
            batch_size: args.batch,
            warmup_steps: 100.min(args.steps / 10),
            k_shots: args.k,
            ..TrainConfig::default()
        },
        task: TaskConfig::default(),
    };
    let spec = EvalSpec {
        n_episodes: args.episodes,
        ..EvalSpec::default()
    };
    let start = Instant::now();
    let mut runner = Runner::with_progress(move |msg| eprintln!("[{:>6.0}s] {msg}", start.elapsed().as_secs_f64()));
    let table = run_ablation(args.suite, &base, &args.seeds, &spec, &mut runner);

    println!("{:<16} {:<17} {:>2}  {:>9} {:>9} {:>9} {:>9} {:>9}", "arm", "setting", "k", "dir", "vis", "out", "id", "mse");
    for s in table.summary() {
        let m = |n: &str| s.metric(n).unwrap_or(f64::NAN);
        println!(
            "{:<16} {:<17} {:>2}  {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.5}",
            s.arm,
            s.setting.to_string(),
            s.k_shots,
            m("dir_align"),
            m("vis_align"),
            m("out_sim"),
            m("id_sim"),
            m("pixel_mse")
        );
    }
    for f in &table.failures {
        println!("FAILED {} seed {}: {}", f.arm, f.seed, f.error);
    }
    if let Some(dir) = args.out {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join(format!("{}.csv", args.suite)), table.to_csv())?;
        std::fs::write(dir.join(format!("{}_plot.csv", args.suite)), table.plot_data_csv())?;
        std::fs::write(dir.join(format!("{}.json", args.suite)), serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}

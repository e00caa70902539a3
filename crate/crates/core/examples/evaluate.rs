//! Evaluates a checkpoint on both split sides, every setting and k = 1..3.
//! Without a path it trains a short run first.
//!
//! ```text
//! cargo run --release --example evaluate -- [checkpoint.gsai]
//! ```

use gsai::eval::{evaluate, report_csv};
use gsai::model::ModelConfig;
use gsai::task::{Setting, SplitSide, TaskConfig};
use gsai::train::{load_checkpoint, train, TrainConfig};

fn main() -> gsai::Result<()> {
    let ckpt = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path)?,
        None => {
            eprintln!("no checkpoint given, training 300 steps");
            let tc = TrainConfig {
                steps: 300,
                batch_size: 16,
                warmup_steps: 30,
                ..TrainConfig::default()
            };
            train(&ModelConfig::default(), &tc, &TaskConfig::default())?
        }
    };
    let mut reports = Vec::new();
    for side in [SplitSide::Train, SplitSide::Test] {
        for setting in Setting::ALL {
            for k in 1..=3 {
                reports.push(evaluate(&ckpt, side, setting, k, 64, 12345)?);
            }
        }
    }
    print!("{}", report_csv(&reports));
    Ok(())
}

//! Trains the toy model and reports the loss curve and held-out metrics.
//!
//! ```text
//! cargo run --release --example train_toy -- [steps] [batch_size] [mask: group|causal]
//! ```

use std::time::Instant;

use gsai::eval::evaluate_params;
use gsai::layout::MaskKind;
use gsai::model::ModelConfig;
use gsai::task::{Setting, SplitSide, TaskConfig};
use gsai::train::{train_with, ConfigSet, TrainConfig};

fn main() -> gsai::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let batch_size = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let mask_kind: MaskKind = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(MaskKind::Group);

    let configs = ConfigSet {
        model: ModelConfig {
            mask_kind,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            steps,
            batch_size,
            warmup_steps: 100.min(steps / 10),
            ..TrainConfig::default()
        },
        task: TaskConfig::default(),
    };
    let world = configs.validate()?;
    let start = Instant::now();
    let every = (steps / 20).max(1);
    let ckpt = train_with(&configs, &mut |r| {
        if r.step % every == 0 || r.step + 1 == steps {
            println!(
                "step {:>5}  lr {:.2e}  recon {:.5}  relation {:.4}  total {:.5}  ({:.1}s)",
                r.step,
                r.lr,
                r.recon,
                r.relation,
                r.total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let secs = start.elapsed().as_secs_f64();
    println!("{steps} steps in {secs:.1}s ({:.1} ms/step)", 1e3 * secs / steps.max(1) as f64);

    if let (Some(first), Some(last)) = (ckpt.history.losses.first(), ckpt.history.losses.last()) {
        println!("recon {:.5} -> {:.5} ({:.1}x)", first.recon, last.recon, first.recon / last.recon);
    }
    for setting in [Setting::InDist, Setting::OutDist] {
        for side in [SplitSide::Train, SplitSide::Test] {
            let r = evaluate_params(&ckpt.params, &world, side, setting, configs.train.k_shots, 256, 99)?;
            println!(
                "{side:?} {setting}: pixel_mse {:.5}  dir_align {:.3}  vis_align {:.3}  out_sim {:.3}",
                r.pixel_mse.mean, r.dir_align.mean, r.vis_align.mean, r.out_sim.mean
            );
        }
    }
    Ok(())
}

//! Perturbs one segment of a real episode batch and shows which outputs
//! move. Under the group mask the manipulation summaries never see the
//! query, and a single block's output never sees the instruction.
//!
//! ```text
//! cargo run --release --example isolation
//! ```

use gsai::layout::MaskKind;
use gsai::model::{forward, init_params, EpisodeBatch, ModelConfig};
use gsai::task::{Guidance, Setting, SplitSide, TaskConfig, TaskWorld};
use gsai::tensor::Tensor;

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> gsai::Result<()> {
    let world = TaskWorld::new(&TaskConfig::default())?;
    let episodes = (0..4)
        .map(|i| world.episode(SplitSide::Train, Setting::InDist, 2, i))
        .collect::<gsai::Result<Vec<_>>>()?;
    let batch = EpisodeBatch::from_episodes(&episodes, &world, Guidance::Both)?;

    for (kind, n_blocks) in [(MaskKind::Group, 4), (MaskKind::Causal, 4), (MaskKind::Group, 1), (MaskKind::Causal, 1)] {
        let cfg = ModelConfig {
            mask_kind: kind,
            n_blocks,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg)?;
        let layout = cfg.layout(2)?;
        let mask = cfg.mask(&layout);
        let base = forward(&params, &batch, &layout, &mask)?;

        let mut q = batch.clone();
        q.query = q.query.map(|v| 1.0 - v);
        let out_q = forward(&params, &q, &layout, &mask)?;

        let mut instr = batch.clone();
        instr.descriptors = instr.descriptors.map(|v| -v);
        let out_i = forward(&params, &instr, &layout, &mask)?;

        println!("{kind} mask, {n_blocks} block(s)");
        println!("  query changed:       zbar moves {:.3e}", max_diff(&base.zbar_per_block, &out_q.zbar_per_block));
        println!("  instruction changed: output moves {:.3e}", max_diff(&base.gen_out, &out_i.gen_out));
    }
    Ok(())
}

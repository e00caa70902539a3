//! Draws the group and causal masks for a small layout and checks which
//! one routes all context through the manipulation tokens.
//!
//! ```text
//! cargo run --example verify_mask -- [shots] [layers]
//! ```

use gsai::layout::{build_layout, build_mask, reachability_report, MaskKind, SegmentKind};

fn main() -> gsai::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let shots = args.first().copied().unwrap_or(1);
    let layers = args.get(1).copied().unwrap_or(4);
    // Two tokens per segment keeps the picture readable.
    let layout = build_layout(2, 2, 2, shots)?;
    let kinds = layout.kinds();

    for kind in [MaskKind::Group, MaskKind::Causal] {
        let mask = build_mask(&layout, kind);
        println!("{kind} mask, {} of {} entries admitted", mask.count_allowed(), mask.rows() * mask.cols());
        for q in 0..mask.rows() {
            let row: String = (0..mask.cols()).map(|k| if mask.allowed(q, k) { '#' } else { '.' }).collect();
            println!("  {:<10} {row}", kinds[q].to_string());
        }
        let report = reachability_report(&mask, &layout, layers);
        let direct = report.flow(SegmentKind::Instr, SegmentKind::Gen).and_then(|f| f.min_layers);
        println!(
            "  INSTR -> GEN after {} layers; context reaches GEN within {layers}: {}; MANIP is a vertex cut: {}\n",
            direct.map_or("never".to_string(), |l| l.to_string()),
            report.context_reaches_gen,
            report.manip_is_vertex_cut
        );
    }
    Ok(())
}

//! Samples a few episodes from each setting, prints them as JSON records,
//! and checks the codec round trip on every image.
//!
//! ```text
//! cargo run --example episodes -- [k]
//! ```

use gsai::task::{Setting, SplitSide, TaskConfig, TaskWorld};

fn main() -> gsai::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let world = TaskWorld::new(&TaskConfig::default())?;
    println!(
        "{} training bins, {} held-out bins; codec {} tokens of width {}",
        world.split.train().len(),
        world.split.test().len(),
        world.codec.n_tokens(),
        world.codec.token_dim()
    );
    let mut worst = 0.0f64;
    for setting in Setting::ALL {
        for side in [SplitSide::Train, SplitSide::Test] {
            let ep = world.episode(side, setting, k, 7)?;
            println!("\n{setting} / {side:?}: rule {:?}", ep.rule);
            println!("{}", serde_json::to_string(&ep.record)?);
            let images = ep.exemplars.iter().flat_map(|(s, t)| [s, t]).chain([&ep.query, &ep.target]);
            for img in images {
                let back = world.codec.decode(&world.codec.encode(img)?)?;
                let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(err);
            }
        }
    }
    println!("\nworst codec round-trip error {worst:.1e}");
    Ok(())
}

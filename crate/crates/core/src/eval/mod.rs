//! Token-space metrics, seeded evaluation and the ablation runner.
//!
//! With `e(·)` the flattened codec encoding:
//!
//! | metric      | definition                                         |
//! |-------------|----------------------------------------------------|
//! | `dir_align` | `cos(e(pred) − e(X), e(Y) − e(X))`                 |
//! | `vis_align` | `cos(e(pred) − e(X), mean_j(e(Y′ⱼ) − e(X′ⱼ)))`     |
//! | `out_sim`   | `cos(e(pred), e(Y))`                               |
//! | `id_sim`    | `cos(e(pred), e(X))`, reported but never ranked on |
//! | `pixel_mse` | mean squared pixel error against `Y`               |
//!
//! A cosine involving a zero vector is reported as 0 and flagged.

mod ablation;

pub use ablation::{
    arm_configs, run_ablation, AblationRow, AblationSuite, AblationTable, ArmFailure, ArmSummary, EvalSpec, Runner,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_images, ModelParams};
use crate::task::{Codec, Episode, Image, Setting, SplitSide, TaskWorld};
use crate::train::Checkpoint;

/// Vectors with a norm below this count as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Episodes per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub dir_align: f64,
    pub vis_align: f64,
    pub out_sim: f64,
    pub id_sim: f64,
    pub pixel_mse: f64,
    pub dir_zero: bool,
    pub vis_zero: bool,
    pub out_zero: bool,
    pub id_zero: bool,
}

/// Cosine with the zero-vector guard; the flag is set when either side is zero.
pub fn guarded_cos(a: &[f64], b: &[f64]) -> (f64, bool) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return (0.0, true);
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    (c.clamp(-1.0, 1.0), false)
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn compute_metrics(pred: &Image, ep: &Episode, codec: &Codec) -> Result<EpisodeMetrics> {
    if pred.size() != ep.target.size() {
        return Err(Error::Codec(format!(
            "prediction is {}×{}, target is {}×{}",
            pred.size(),
            pred.size(),
            ep.target.size(),
            ep.target.size()
        )));
    }
    let e = |img: &Image| codec.encode(img).map(|t| t.into_data());
    let (p, x, y) = (e(pred)?, e(&ep.query)?, e(&ep.target)?);
    let mut shot_delta = vec![0.0; p.len()];
    for (src, tgt) in &ep.exemplars {
        for (acc, d) in shot_delta.iter_mut().zip(sub(&e(tgt)?, &e(src)?)) {
            *acc += d / ep.exemplars.len() as f64;
        }
    }
    let edit = sub(&p, &x);
    let (dir_align, dir_zero) = guarded_cos(&edit, &sub(&y, &x));
    let (vis_align, vis_zero) = guarded_cos(&edit, &shot_delta);
    let (out_sim, out_zero) = guarded_cos(&p, &y);
    let (id_sim, id_zero) = guarded_cos(&p, &x);
    Ok(EpisodeMetrics {
        dir_align,
        vis_align,
        out_sim,
        id_sim,
        pixel_mse: pred.mse(&ep.target),
        dir_zero,
        vis_zero,
        out_zero,
        id_zero,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dir_align: Stat,
    pub vis_align: Stat,
    pub out_sim: Stat,
    pub id_sim: Stat,
    pub pixel_mse: Stat,
    /// Episodes whose `dir_align` / `vis_align` hit the zero-vector guard.
    pub dir_flagged: usize,
    pub vis_flagged: usize,
    pub n_episodes: usize,
    pub split: SplitSide,
    pub setting: Setting,
    pub k_shots: usize,
    pub seed: u64,
}

pub const METRIC_NAMES: [&str; 5] = ["dir_align", "vis_align", "out_sim", "id_sim", "pixel_mse"];

impl MetricsReport {
    pub fn aggregate(
        per_episode: &[EpisodeMetrics],
        split: SplitSide,
        setting: Setting,
        k_shots: usize,
        seed: u64,
    ) -> MetricsReport {
        let col = |f: fn(&EpisodeMetrics) -> f64| Stat::of(&per_episode.iter().map(f).collect::<Vec<_>>());
        MetricsReport {
            dir_align: col(|m| m.dir_align),
            vis_align: col(|m| m.vis_align),
            out_sim: col(|m| m.out_sim),
            id_sim: col(|m| m.id_sim),
            pixel_mse: col(|m| m.pixel_mse),
            dir_flagged: per_episode.iter().filter(|m| m.dir_zero).count(),
            vis_flagged: per_episode.iter().filter(|m| m.vis_zero).count(),
            n_episodes: per_episode.len(),
            split,
            setting,
            k_shots,
            seed,
        }
    }

    /// `(name, mean)` in [`METRIC_NAMES`] order.
    pub fn means(&self) -> [(&'static str, f64); 5] {
        [
            ("dir_align", self.dir_align.mean),
            ("vis_align", self.vis_align.mean),
            ("out_sim", self.out_sim.mean),
            ("id_sim", self.id_sim.mean),
            ("pixel_mse", self.pixel_mse.mean),
        ]
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.means().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }
}

/// The episodes an evaluation with these arguments sees.
pub fn eval_episodes(
    world: &TaskWorld,
    side: SplitSide,
    setting: Setting,
    k: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_episodes).map(|_| world.episode(side, setting, k, rng.gen())).collect()
}

pub fn evaluate_params(
    params: &ModelParams,
    world: &TaskWorld,
    side: SplitSide,
    setting: Setting,
    k: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if n_episodes == 0 {
        return Err(Error::Episode("n_episodes must be at least 1".into()));
    }
    let episodes = eval_episodes(world, side, setting, k, n_episodes, seed)?;
    let mut per = Vec::with_capacity(n_episodes);
    for chunk in episodes.chunks(EVAL_BATCH) {
        let preds = predict_images(params, chunk, world, world.config.guidance)?;
        for (pred, ep) in preds.iter().zip(chunk) {
            per.push(compute_metrics(pred, ep, &world.codec)?);
        }
    }
    Ok(MetricsReport::aggregate(&per, side, setting, k, seed))
}

pub fn evaluate(
    ckpt: &Checkpoint,
    side: SplitSide,
    setting: Setting,
    k: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let world = TaskWorld::new(&ckpt.configs.task)?;
    evaluate_params(&ckpt.params, &world, side, setting, k, n_episodes, seed)
}

pub fn report_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("split,setting,k_shots,seed,n_episodes,metric,mean,std\n");
    for r in reports {
        let stats = [r.dir_align, r.vis_align, r.out_sim, r.id_sim, r.pixel_mse];
        for (name, s) in METRIC_NAMES.iter().zip(stats) {
            out.push_str(&format!(
                "{},{},{},{},{},{name},{},{}\n",
                side_name(r.split),
                r.setting,
                r.k_shots,
                r.seed,
                r.n_episodes,
                s.mean,
                s.std
            ));
        }
    }
    out
}

pub(crate) fn side_name(side: SplitSide) -> &'static str {
    match side {
        SplitSide::Train => "train",
        SplitSide::Test => "test",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::task::{Rule, TaskConfig};

    fn world() -> TaskWorld {
        TaskWorld::new(&TaskConfig::default()).unwrap()
    }

    fn episode(w: &TaskWorld, seed: u64) -> Episode {
        w.episode(SplitSide::Test, Setting::InDist, 2, seed).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let w = world();
        let ep = episode(&w, 1);
        let m = compute_metrics(&ep.target, &ep, &w.codec).unwrap();
        assert!((m.out_sim - 1.0).abs() <= 1e-12);
        assert_eq!(m.pixel_mse, 0.0);
        if !m.dir_zero {
            assert!((m.dir_align - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn copying_the_query_is_flagged() {
        let w = world();
        for seed in 0..20 {
            let ep = episode(&w, seed);
            let m = compute_metrics(&ep.query, &ep, &w.codec).unwrap();
            assert!(m.dir_zero && m.vis_zero);
            assert_eq!((m.dir_align, m.vis_align), (0.0, 0.0));
            assert!((m.id_sim - 1.0).abs() <= 1e-12);
            assert_eq!(m.pixel_mse, ep.query.mse(&ep.target));
        }
    }

    #[test]
    fn two_pixel_hand_case() {
        // One 2×2 image with a single patch; encodings are orthogonal maps,
        // so cosines equal pixel-space cosines.
        let codec = Codec::new(2, 2, 5).unwrap();
        let img = |v: [f64; 12]| Image::from_data(2, v.to_vec()).unwrap();
        let x = img([0.5; 12]);
        let mut yv = [0.5; 12];
        yv[0] = 1.0;
        yv[1] = 0.0;
        let y = img(yv);
        let mut pv = [0.5; 12];
        pv[0] = 1.0;
        let pred = img(pv);
        let rule = Rule::Brightness { delta: 0.0 };
        let record = crate::task::EpisodeRecord {
            rule: rule.clone(),
            setting: Setting::InDist,
            k: 1,
            seed: 0,
            grid: 2,
            query: crate::task::ImageRef {
                family: crate::task::ContentFamily::Stripes,
                seed: 0,
            },
            exemplars: vec![],
        };
        let ep = Episode {
            record,
            rule,
            exemplars: vec![(x.clone(), y.clone())],
            query: x,
            target: y,
            setting: Setting::InDist,
        };
        let m = compute_metrics(&pred, &ep, &codec).unwrap();
        // edit = (0.5, 0, …), change = (0.5, −0.5, …): cos = 0.25 / (0.5·√0.5).
        let want = 0.25 / (0.5 * 0.5f64.sqrt());
        assert!((m.dir_align - want).abs() <= 1e-12);
        assert!((m.vis_align - want).abs() <= 1e-12);
        assert!((m.pixel_mse - 0.25 / 12.0).abs() <= 1e-15);
        // pred·y = 1 + 0.25·10 = 3.5; |pred|² = 1 + 0.25 + 2.5; |y|² = 1 + 2.5.
        let out = 3.5 / ((3.75f64).sqrt() * 3.5f64.sqrt());
        assert!((m.out_sim - out).abs() <= 1e-12);
    }

    #[test]
    fn aggregation_matches_arithmetic_mean() {
        let w = world();
        let per: Vec<EpisodeMetrics> = (0..7)
            .map(|s| {
                let ep = episode(&w, s);
                let pred = ep.exemplars[0].1.clone();
                compute_metrics(&pred, &ep, &w.codec).unwrap()
            })
            .collect();
        let r = MetricsReport::aggregate(&per, SplitSide::Test, Setting::InDist, 2, 0);
        let mean = per.iter().map(|m| m.out_sim).sum::<f64>() / 7.0;
        assert!((r.out_sim.mean - mean).abs() <= 1e-12);
        assert!(per.iter().all(|m| (-1.0..=1.0).contains(&m.dir_align)));
        let one = MetricsReport::aggregate(&per[..1], SplitSide::Test, Setting::InDist, 2, 0);
        assert_eq!(one.pixel_mse.std, 0.0);
    }

    #[test]
    fn evaluation_is_pure_and_stays_on_its_side() {
        let w = world();
        let p = init_params(&ModelConfig::default()).unwrap();
        let before = p.clone();
        let a = evaluate_params(&p, &w, SplitSide::Test, Setting::OutDist, 1, 5, 9).unwrap();
        let b = evaluate_params(&p, &w, SplitSide::Test, Setting::OutDist, 1, 5, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, before);
        for ep in eval_episodes(&w, SplitSide::Test, Setting::OutDist, 1, 200, 9).unwrap() {
            assert!(w.split.test().contains(&ep.rule.bin_id()));
        }
        assert!(evaluate_params(&p, &w, SplitSide::Test, Setting::OutDist, 1, 0, 9).is_err());
    }
}

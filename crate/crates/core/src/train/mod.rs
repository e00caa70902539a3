//! Optimization of [`ModelParams`] on sampled training episodes.

mod adamw;
mod checkpoint;

pub use adamw::{adamw_step, clip_grad_norm, global_norm, AdamState, AdamWParams, StepOutcome, ADAM_EPS};
pub use checkpoint::{
    config_digest, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION,
};

use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_params, MetricsReport};
use crate::layout::{AttentionMask, SequenceLayout};
use crate::losses::{recon_loss_graph, relation_loss_graph, total_loss_graph, LossBreakdown, LossVars};
use crate::model::{forward_graph, init_params, EpisodeBatch, ModelConfig, ModelParams, ParamVars, Traced};
use crate::task::{Episode, Setting, SplitSide, TaskConfig, TaskWorld, DESCRIPTOR_DIM, MAX_DIVERSE_SHOTS};
use crate::tensor::{grad_check, GradCheckReport, Graph, ParamId, Tensor};

/// How the squared Frobenius distance between the two `B×B` relation
/// matrices enters the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RelationReduction {
    /// Mean over the `B²` entries, an MSE between the matrices. Keeps the
    /// term on the scale of the reconstruction loss at any batch size.
    #[default]
    Mean,
    /// The plain squared norm.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the relation term.
    pub alpha: f64,
    pub relation_reduction: RelationReduction,
    pub k_shots: usize,
    /// Draw `k` uniformly from `1..=k_shots` per step instead of fixing it.
    pub mixed_shots: bool,
    pub seed: u64,
    /// Evaluate on the test split every this many steps; 0 disables.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    /// Toy schedule. The reference system trains 20000 steps at batch 480
    /// with peak learning rate 1e-4 after 500 warmup steps.
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            peak_lr: 3e-4,
            warmup_steps: 100,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.98,
            alpha: 0.1,
            relation_reduction: RelationReduction::Mean,
            k_shots: 1,
            mixed_shots: false,
            seed: 0,
            eval_every: 0,
            eval_episodes: 64,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::TrainConfig(m));
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return bad(format!("warmup_steps {} must be below steps {}", self.warmup_steps, self.steps));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for the relation term".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.alpha < 0.0 {
            return bad("weight_decay and alpha must be non-negative".into());
        }
        if self.k_shots == 0 {
            return bad("k_shots must be at least 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1 when eval_every is set".into());
        }
        Ok(())
    }

    /// The factor on the Frobenius relation term in the objective.
    pub fn relation_weight(&self) -> f64 {
        match self.relation_reduction {
            RelationReduction::Sum => self.alpha,
            RelationReduction::Mean => self.alpha / (self.batch_size * self.batch_size) as f64,
        }
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup to `peak_lr`, then cosine annealing to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.steps {
        return Err(Error::ScheduleRange {
            step,
            steps: cfg.steps,
        });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let span = cfg.steps - cfg.warmup_steps;
    if span == 0 {
        return Ok(cfg.peak_lr);
    }
    let frac = (step - cfg.warmup_steps) as f64 / span as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (PI * frac).cos()))
}

/// Everything a run is a function of.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSet {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
}

impl ConfigSet {
    pub fn validate(&self) -> Result<TaskWorld> {
        self.model.validate()?;
        self.train.validate()?;
        let world = TaskWorld::new(&self.task)?;
        if self.model.visual_tokens != world.codec.n_tokens() || self.model.token_dim != world.codec.token_dim() {
            return Err(Error::ModelConfig(format!(
                "visual_tokens={} and token_dim={} must match the codec's {} tokens of width {}",
                self.model.visual_tokens,
                self.model.token_dim,
                world.codec.n_tokens(),
                world.codec.token_dim()
            )));
        }
        if self.task.train_settings.is_empty() {
            return Err(Error::TrainConfig("train_settings is empty".into()));
        }
        if self.task.train_settings.contains(&Setting::OutDistDiverse) && self.train.k_shots > MAX_DIVERSE_SHOTS {
            return Err(Error::TrainConfig(format!(
                "diverse training needs k_shots ≤ {MAX_DIVERSE_SHOTS}"
            )));
        }
        Ok(world)
    }

    pub fn digest_hex(&self) -> Result<String> {
        let d = config_digest(&serde_json::to_vec(self)?);
        Ok(d.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Number of updates applied before this loss was measured.
    pub step: usize,
    /// Learning rate of the update that followed.
    pub lr: f64,
    pub recon: f64,
    pub relation: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricHistory {
    pub losses: Vec<LogRecord>,
    pub evals: Vec<EvalRecord>,
    /// Steps whose update was skipped for non-finite gradients.
    pub skipped: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub configs: ConfigSet,
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: usize,
    pub history: MetricHistory,
}

impl Checkpoint {
    pub fn init(configs: &ConfigSet) -> Result<Checkpoint> {
        configs.validate()?;
        let params = init_params(&configs.model)?;
        let adam = AdamState::zeros_like(&params.entries().iter().map(|(_, t, _)| *t).collect::<Vec<_>>());
        Ok(Checkpoint {
            configs: configs.clone(),
            params,
            adam,
            step: 0,
            history: MetricHistory::default(),
        })
    }
}

/// Builds the full objective for one batch on `g`.
pub fn objective_graph(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    batch: &EpisodeBatch,
    layout: &SequenceLayout,
    mask: &Arc<AttentionMask>,
    alpha: f64,
) -> Result<(Traced, LossVars)> {
    let traced = forward_graph(g, pv, cfg, batch, layout, mask)?;
    let recon = recon_loss_graph(g, traced.gen_out, &batch.target)?;
    let relation = relation_loss_graph(g, &traced.zbars, &batch.phi)?;
    let loss = total_loss_graph(g, recon, relation, alpha)?;
    Ok((traced, loss))
}

/// Loss and per-parameter gradients (entry order) for one batch.
pub fn loss_and_grads(params: &ModelParams, batch: &EpisodeBatch, alpha: f64) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let cfg = &params.config;
    let layout = cfg.layout(batch.k())?;
    let mask = Arc::new(cfg.mask(&layout));
    let mut g = Graph::new();
    let pv = params.register(&mut g);
    let (_, loss) = objective_graph(&mut g, &pv, cfg, batch, &layout, &mask, alpha)?;
    let breakdown = loss.breakdown(&g, alpha)?;
    let mut grads = g.backward(loss.total)?;
    let out = params
        .entries()
        .iter()
        .enumerate()
        .map(|(i, (_, t, _))| grads.take(ParamId(i)).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((breakdown, out))
}

/// The training episodes of update `step`; a pure function of the seed and
/// the step index.
pub fn step_episodes(world: &TaskWorld, cfg: &TrainConfig, step: usize) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64);
    let k = if cfg.mixed_shots {
        rng.gen_range(1..=cfg.k_shots)
    } else {
        cfg.k_shots
    };
    (0..cfg.batch_size)
        .map(|_| {
            let setting = *world.config.train_settings.choose(&mut rng).expect("validated non-empty");
            world.episode(SplitSide::Train, setting, k, rng.gen())
        })
        .collect()
}

/// Advances `ckpt` by one update.
pub fn train_step(ckpt: &mut Checkpoint, world: &TaskWorld) -> Result<LogRecord> {
    let cfg = &ckpt.configs.train;
    let step = ckpt.step;
    let episodes = step_episodes(world, cfg, step)?;
    let batch = EpisodeBatch::from_episodes(&episodes, world, world.config.guidance)?;
    let (loss, mut grads) = loss_and_grads(&ckpt.params, &batch, cfg.relation_weight())?;
    if !loss.total.is_finite() {
        return Err(Error::Diverged {
            step,
            loss: loss.total,
            last: Box::new(ckpt.clone()),
        });
    }
    let lr = lr_at(step + 1, cfg)?;
    clip_grad_norm(&mut grads, cfg.grad_clip);
    let hp = cfg.adamw();
    let mut entries = ckpt.params.entries_mut();
    let decays: Vec<bool> = entries.iter().map(|(_, _, k)| k.decays()).collect();
    let mut slots: Vec<&mut Tensor> = entries.iter_mut().map(|(_, t, _)| &mut **t).collect();
    if let StepOutcome::Skipped { .. } = adamw_step(&mut slots, &decays, &grads, &mut ckpt.adam, lr, hp)? {
        ckpt.history.skipped.push(step);
    }
    ckpt.step += 1;
    let record = LogRecord {
        step,
        lr,
        recon: loss.recon,
        relation: loss.relation,
        total: loss.total,
    };
    ckpt.history.losses.push(record);
    Ok(record)
}

/// Runs the configured number of steps, calling `on_log` after each.
pub fn train_with(configs: &ConfigSet, on_log: &mut dyn FnMut(&LogRecord)) -> Result<Checkpoint> {
    let world = configs.validate()?;
    let mut ckpt = Checkpoint::init(configs)?;
    let cfg = configs.train.clone();
    while ckpt.step < cfg.steps {
        let record = train_step(&mut ckpt, &world)?;
        on_log(&record);
        if cfg.eval_every > 0 && ckpt.step % cfg.eval_every == 0 {
            let report = evaluate_params(
                &ckpt.params,
                &world,
                SplitSide::Test,
                Setting::OutDist,
                cfg.k_shots,
                cfg.eval_episodes,
                cfg.seed,
            )?;
            ckpt.history.evals.push(EvalRecord { step: ckpt.step, report });
        }
    }
    Ok(ckpt)
}

pub fn train(model: &ModelConfig, train: &TrainConfig, task: &TaskConfig) -> Result<Checkpoint> {
    let configs = ConfigSet {
        model: model.clone(),
        train: train.clone(),
        task: task.clone(),
    };
    train_with(&configs, &mut |_| {})
}

/// A batch of uniform random tokens with unit-norm random instruction
/// embeddings, shaped for `cfg` with `k` shots.
pub fn random_batch(cfg: &ModelConfig, batch_size: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<EpisodeBatch> {
    let mut randt = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let img = [batch_size, cfg.visual_tokens, cfg.token_dim];
    let descriptors = randt(&[batch_size, DESCRIPTOR_DIM])?;
    let exemplar_src = (0..k).map(|_| randt(&img)).collect::<Result<_>>()?;
    let exemplar_tgt = (0..k).map(|_| randt(&img)).collect::<Result<_>>()?;
    let query = randt(&img)?;
    let target = randt(&img)?;
    let mut phi = randt(&[batch_size, 4])?;
    for row in phi.data_mut().chunks_mut(4) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(EpisodeBatch {
        descriptors,
        exemplar_src,
        exemplar_tgt,
        query,
        target,
        phi,
    })
}

/// Central-difference check of the full objective with respect to every
/// parameter, on a random batch of two one-shot episodes. The initial
/// weights get uniform noise in ±0.5 so every path carries signal.
pub fn objective_grad_check(model: &ModelConfig, alpha: f64, seed: u64) -> Result<GradCheckReport> {
    let mut params = init_params(&ModelConfig { seed, ..model.clone() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for (_, t, _) in params.entries_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
    }
    let batch = random_batch(model, 2, 1, &mut rng)?;
    let layout = model.layout(1)?;
    let mask = Arc::new(model.mask(&layout));
    grad_check(
        |g, vars| {
            let pv = ParamVars::from_slice(vars, model.n_blocks);
            Ok(objective_graph(g, &pv, model, &batch, &layout, &mask, alpha)?.1.total)
        },
        &params.tensors(),
        1e-5,
    )
}

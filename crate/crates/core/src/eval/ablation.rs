use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate_params, MetricsReport, METRIC_NAMES};
use crate::error::{Error, Result};
use crate::layout::MaskKind;
use crate::task::{Guidance, Setting, SplitSide};
use crate::train::{load_checkpoint, save_checkpoint, train_with, Checkpoint, ConfigSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationSuite {
    /// Plain causal mask, group mask, group mask with relation term.
    Components,
    /// Instruction only, exemplars only, both.
    Guidance,
    /// One model evaluated at every shot count and setting.
    Shots,
    /// Manipulation-token count sweep.
    Tokens,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 4] = [
        AblationSuite::Components,
        AblationSuite::Guidance,
        AblationSuite::Shots,
        AblationSuite::Tokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSuite::Components => "components",
            AblationSuite::Guidance => "guidance",
            AblationSuite::Shots => "shots",
            AblationSuite::Tokens => "tokens",
        }
    }
}

impl fmt::Display for AblationSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationSuite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        AblationSuite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}`"))
    }
}

/// What every arm is evaluated on. Evaluation always uses the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    /// Settings for the components, guidance and tokens suites.
    pub settings: Vec<Setting>,
    /// Shot counts for the shots suite; its model trains with `k` drawn
    /// from `1..=max`.
    pub shots: Vec<usize>,
    pub token_counts: Vec<usize>,
    pub n_episodes: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            settings: vec![Setting::InDist, Setting::OutDist],
            shots: vec![1, 2, 3],
            token_counts: vec![2, 4, 8, 16, 32],
            n_episodes: 256,
            seed: 12345,
        }
    }
}

struct Arm {
    name: String,
    configs: ConfigSet,
    evals: Vec<(Setting, usize)>,
}

fn arms(suite: AblationSuite, base: &ConfigSet, spec: &EvalSpec) -> Vec<Arm> {
    let alpha = if base.train.alpha > 0.0 { base.train.alpha } else { 0.1 };
    let full = {
        let mut c = base.clone();
        c.model.mask_kind = MaskKind::Group;
        c.train.alpha = alpha;
        c.task.guidance = Guidance::Both;
        c
    };
    let k = base.train.k_shots;
    let per_setting: Vec<(Setting, usize)> = spec.settings.iter().map(|&s| (s, k)).collect();
    let arm = |name: &str, configs: ConfigSet| Arm {
        name: name.to_string(),
        configs,
        evals: per_setting.clone(),
    };
    match suite {
        AblationSuite::Components => {
            let mut causal = full.clone();
            causal.model.mask_kind = MaskKind::Causal;
            causal.train.alpha = 0.0;
            let mut group = full.clone();
            group.train.alpha = 0.0;
            vec![arm("plain_causal", causal), arm("group", group), arm("group_relation", full)]
        }
        AblationSuite::Guidance => [Guidance::VisualOnly, Guidance::TextOnly, Guidance::Both]
            .into_iter()
            .map(|g| {
                let mut c = full.clone();
                c.task.guidance = g;
                arm(g.name(), c)
            })
            .collect(),
        AblationSuite::Shots => {
            let mut c = full;
            c.train.k_shots = spec.shots.iter().copied().max().unwrap_or(1);
            c.train.mixed_shots = c.train.k_shots > 1;
            let evals = spec
                .shots
                .iter()
                .flat_map(|&k| Setting::ALL.into_iter().map(move |s| (s, k)))
                .collect();
            vec![Arm {
                name: "group_relation".into(),
                configs: c,
                evals,
            }]
        }
        AblationSuite::Tokens => spec
            .token_counts
            .iter()
            .map(|&m| {
                let mut c = full.clone();
                c.model.manip_tokens = m;
                arm(&format!("M={m}"), c)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub manip_tokens: usize,
    pub config_digest: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmFailure {
    pub arm: String,
    pub seed: u64,
    pub error: String,
}

/// Seed-averaged metrics of one `(arm, setting, k)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub setting: Setting,
    pub k_shots: usize,
    pub n_seeds: usize,
    pub means: Vec<(String, f64)>,
}

impl ArmSummary {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.means.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: AblationSuite,
    pub rows: Vec<AblationRow>,
    pub failures: Vec<ArmFailure>,
}

impl AblationTable {
    /// One summary per `(arm, setting, k)` in first-seen order.
    pub fn summary(&self) -> Vec<ArmSummary> {
        let mut keys: Vec<(String, Setting, usize)> = Vec::new();
        for r in &self.rows {
            let key = (r.arm.clone(), r.report.setting, r.report.k_shots);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(arm, setting, k_shots)| {
                let rows: Vec<&AblationRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.arm == arm && r.report.setting == setting && r.report.k_shots == k_shots)
                    .collect();
                let means = METRIC_NAMES
                    .iter()
                    .map(|&m| {
                        let sum: f64 = rows.iter().map(|r| r.report.metric(m).unwrap_or(f64::NAN)).sum();
                        (m.to_string(), sum / rows.len() as f64)
                    })
                    .collect();
                ArmSummary {
                    arm,
                    setting,
                    k_shots,
                    n_seeds: rows.len(),
                    means,
                }
            })
            .collect()
    }

    /// Seed-averaged value of `metric`, or `None` if the cell is missing.
    pub fn mean(&self, arm: &str, setting: Setting, k: usize, metric: &str) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.arm == arm && s.setting == setting && s.k_shots == k)
            .and_then(|s| s.metric(metric))
    }

    /// One row per arm cell, metrics as columns.
    pub fn to_csv(&self) -> String {
        let mut out = format!("suite,arm,setting,k_shots,n_seeds,{}\n", METRIC_NAMES.join(","));
        for s in self.summary() {
            let vals: Vec<String> = s.means.iter().map(|(_, v)| v.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.suite,
                s.arm,
                s.setting,
                s.k_shots,
                s.n_seeds,
                vals.join(",")
            ));
        }
        out
    }

    /// Long form, one line per `(arm, metric, seed)`.
    pub fn plot_data_csv(&self) -> String {
        let mut out = String::from("suite,arm,setting,k_shots,metric,value,seed\n");
        for r in &self.rows {
            for (m, v) in r.report.means() {
                out.push_str(&format!(
                    "{},{},{},{},{m},{v},{}\n",
                    self.suite, r.arm, r.report.setting, r.report.k_shots, r.seed
                ));
            }
        }
        out
    }
}

/// Trains arms on demand and memoizes them by config digest, so arms
/// shared between suites are trained once.
#[derive(Default)]
pub struct Runner {
    cache: HashMap<String, Arc<Checkpoint>>,
    progress: Option<Box<dyn FnMut(&str)>>,
    /// Trained checkpoints are also saved here as `<digest>.gsai` and
    /// reloaded on later runs. Training is deterministic, so a stored file
    /// is exactly what retraining would produce.
    disk: Option<PathBuf>,
    /// Training wall time per digest; cached files carry theirs in a
    /// `<digest>.secs` sidecar.
    seconds: HashMap<String, f64>,
}

impl Runner {
    pub fn new() -> Self {
        Runner::default()
    }

    pub fn with_progress(progress: impl FnMut(&str) + 'static) -> Self {
        Runner {
            progress: Some(Box::new(progress)),
            ..Runner::default()
        }
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.disk = Some(dir.into());
        self
    }

    fn note(&mut self, msg: &str) {
        if let Some(p) = self.progress.as_mut() {
            p(msg);
        }
    }

    pub fn checkpoint(&mut self, configs: &ConfigSet) -> Result<Arc<Checkpoint>> {
        let digest = configs.digest_hex()?;
        if let Some(c) = self.cache.get(&digest) {
            return Ok(c.clone());
        }
        let path = self.disk.as_ref().map(|d| d.join(format!("{digest}.gsai")));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            let ckpt = load_checkpoint(p)?;
            if &ckpt.configs == configs {
                self.note(&format!("loaded {}", &digest[..12]));
                let secs = std::fs::read_to_string(p.with_extension("secs"))
                    .ok()
                    .and_then(|s| s.trim().parse().ok())
                    .unwrap_or(f64::NAN);
                self.seconds.insert(digest.clone(), secs);
                let ckpt = Arc::new(ckpt);
                self.cache.insert(digest, ckpt.clone());
                return Ok(ckpt);
            }
        }
        self.note(&format!("training {}", &digest[..12]));
        let start = Instant::now();
        let ckpt = Arc::new(train_with(configs, &mut |_| {})?);
        let secs = start.elapsed().as_secs_f64();
        self.seconds.insert(digest.clone(), secs);
        if let Some(p) = path {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            save_checkpoint(&ckpt, &p)?;
            let side = p.with_extension("secs");
            std::fs::write(&side, secs.to_string()).map_err(|e| Error::io(&side, e))?;
        }
        self.cache.insert(digest, ckpt.clone());
        Ok(ckpt)
    }

    pub fn trained(&self) -> usize {
        self.cache.len()
    }

    /// Training wall time of the model for `configs`, if this runner has
    /// produced or loaded it. NaN when a cached file has no timing.
    pub fn train_seconds(&self, configs: &ConfigSet) -> Option<f64> {
        self.seconds.get(&configs.digest_hex().ok()?).copied()
    }
}

/// The `(arm, seed, configs)` runs `run_ablation` trains, in order.
pub fn arm_configs(suite: AblationSuite, base: &ConfigSet, seeds: &[u64], spec: &EvalSpec) -> Vec<(String, u64, ConfigSet)> {
    let mut out = Vec::new();
    for arm in arms(suite, base, spec) {
        for &seed in seeds {
            out.push((arm.name.clone(), seed, seeded(&arm.configs, seed)));
        }
    }
    out
}

fn seeded(configs: &ConfigSet, seed: u64) -> ConfigSet {
    let mut c = configs.clone();
    c.model.seed = seed;
    c.train.seed = seed;
    c
}

/// Trains and evaluates every arm of `suite` for every seed. A failing
/// arm is recorded and the rest still run.
pub fn run_ablation(
    suite: AblationSuite,
    base: &ConfigSet,
    seeds: &[u64],
    spec: &EvalSpec,
    runner: &mut Runner,
) -> AblationTable {
    let mut table = AblationTable {
        suite,
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for arm in arms(suite, base, spec) {
        for &seed in seeds {
            let configs = seeded(&arm.configs, seed);
            runner.note(&format!("{suite}/{} seed {seed}", arm.name));
            let result = (|| -> Result<Vec<AblationRow>> {
                let world = configs.validate()?;
                let ckpt = runner.checkpoint(&configs)?;
                let digest = configs.digest_hex()?;
                arm.evals
                    .iter()
                    .map(|&(setting, k)| {
                        let report =
                            evaluate_params(&ckpt.params, &world, SplitSide::Test, setting, k, spec.n_episodes, spec.seed)?;
                        Ok(AblationRow {
                            arm: arm.name.clone(),
                            seed,
                            manip_tokens: configs.model.manip_tokens,
                            config_digest: digest.clone(),
                            report,
                        })
                    })
                    .collect()
            })();
            match result {
                Ok(rows) => table.rows.extend(rows),
                Err(e) => table.failures.push(ArmFailure {
                    arm: arm.name.clone(),
                    seed,
                    error: e.to_string(),
                }),
            }
        }
    }
    table
}

//! The `gsai` command line.
//!
//! | exit | meaning                                                       |
//! |------|---------------------------------------------------------------|
//! | 0    | success                                                       |
//! | 1    | usage: bad flags, unknown config key, wrong value type        |
//! | 2    | runtime: missing file, invalid layout, divergence, failed arm |
//! | 3    | verification: the manipulation tokens are not a vertex cut    |
//!
//! Output directories resolve as `--out`, then `out_dir` in the config,
//! then `$GSA_OUT_DIR`, then `runs`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, RunConfig, OUT_DIR_ENV};
use crate::error::{Error, Result};
use crate::eval::{evaluate, report_csv, run_ablation, AblationSuite, AblationTable, EvalSpec, Runner};
use crate::layout::{build_layout, build_mask, reachability_report, MaskKind};
use crate::model::ModelConfig;
use crate::task::{sample_record, Setting, SplitSide};
use crate::train::{load_checkpoint, save_checkpoint, train_with};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.gsai";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Parser, Debug)]
#[command(name = "gsai", version, about = "Group self-attention for in-context image manipulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Config file in the key = value grammar.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override, e.g. `--set train.alpha=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model; writes config, checkpoint and loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Sets both the model and the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory name under the output root.
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate a checkpoint; writes metrics.json and metrics.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',', default_value = "in_dist,out_dist,out_dist_diverse")]
        settings: Vec<Setting>,
        /// Shot counts; defaults to the k the model trained with.
        #[arg(long, value_delimiter = ',')]
        shots: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        episodes: usize,
        #[arg(long, default_value_t = 12345)]
        seed: u64,
        /// Directory for the metric files; defaults to the checkpoint's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every arm of an ablation suite.
    Ablate {
        suite: AblationSuite,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 256)]
        episodes: usize,
    },
    /// Print the reachability report of a mask as JSON.
    VerifyMask {
        #[arg(long, default_value = "group")]
        mask: MaskKind,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long)]
        instr_tokens: Option<usize>,
        #[arg(long)]
        visual_tokens: Option<usize>,
        #[arg(long)]
        manip_tokens: Option<usize>,
    },
    /// Write sampled episodes as JSON files.
    GenEpisodes {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "in_dist")]
        setting: Setting,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert an ablation table JSON into long-form CSV.
    PlotData {
        /// `table.json` written by `ablate`.
        #[arg(long)]
        table: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Error(Error),
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Error(e.into())
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Verify) => EXIT_VERIFY,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { cfg, seed, name } => cmd_train(&cfg, seed, name),
        Command::Eval {
            checkpoint,
            split,
            settings,
            shots,
            episodes,
            seed,
            out,
        } => cmd_eval(&checkpoint, &split, &settings, &shots, episodes, seed, out),
        Command::Ablate {
            suite,
            cfg,
            seeds,
            episodes,
        } => cmd_ablate(suite, &cfg, &seeds, episodes),
        Command::VerifyMask {
            mask,
            shots,
            layers,
            instr_tokens,
            visual_tokens,
            manip_tokens,
        } => {
            let d = ModelConfig::default();
            cmd_verify_mask(
                mask,
                shots,
                layers,
                instr_tokens.unwrap_or(d.instr_tokens),
                visual_tokens.unwrap_or(d.visual_tokens),
                manip_tokens.unwrap_or(d.manip_tokens),
            )
        }
        Command::GenEpisodes {
            cfg,
            count,
            split,
            setting,
            shots,
            seed,
        } => cmd_gen_episodes(&cfg, count, &split, setting, shots, seed),
        Command::PlotData { table, out } => cmd_plot_data(&table, out.as_deref()),
    }
}

fn resolve(cfg: &ConfigArgs, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = cfg.overrides.clone();
    overrides.extend_from_slice(extra);
    if let Some(out) = &cfg.out {
        overrides.push(format!("out_dir={}", out.display()));
    }
    let env = std::env::var(OUT_DIR_ENV).ok();
    parse_config(cfg.config.as_deref(), &overrides, env.as_deref())
}

fn parse_side(s: &str) -> Result<SplitSide, Failure> {
    match s {
        "train" => Ok(SplitSide::Train),
        "test" => Ok(SplitSide::Test),
        _ => Err(Failure::Usage(format!("split must be `train` or `test`, got `{s}`"))),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the resolved config in both forms.
fn write_config(dir: &Path, run: &RunConfig) -> Result<()> {
    write(&dir.join("config.cfg"), run.to_cfg_string()?)?;
    write(&dir.join("config.json"), serde_json::to_string_pretty(run)?)
}

fn cmd_train(cfg: &ConfigArgs, seed: Option<u64>, name: Option<String>) -> Result<(), Failure> {
    let extra: Vec<String> = seed
        .map(|s| vec![format!("model.seed={s}"), format!("train.seed={s}")])
        .unwrap_or_default();
    let run = resolve(cfg, &extra)?;
    let configs = run.configs();
    let name = match name {
        Some(n) => n,
        None => format!("train-{}", &configs.digest_hex()?[..12]),
    };
    let dir = run.out_dir.join(name);
    create_dir(&dir)?;
    write_config(&dir, &run)?;

    let log_path = dir.join(TRAIN_LOG_FILE);
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let mut io_err = None;
    let every = (configs.train.steps / 20).max(1);
    let result = train_with(&configs, &mut |r| {
        if io_err.is_none() {
            let line = serde_json::to_string(r).expect("log records serialize");
            if let Err(e) = writeln!(log, "{line}") {
                io_err = Some(e);
            }
        }
        if r.step % every == 0 {
            eprintln!("step {:>5}  lr {:.2e}  recon {:.5}  relation {:.4}", r.step, r.lr, r.recon, r.relation);
        }
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e).into());
    }
    let ckpt = match result {
        Ok(c) => c,
        Err(Error::Diverged { step, loss, last }) => {
            save_checkpoint(&last, dir.join(CHECKPOINT_FILE))?;
            return Err(Error::Diverged { step, loss, last }.into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&ckpt, dir.join(CHECKPOINT_FILE))?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    split: &str,
    settings: &[Setting],
    shots: &[usize],
    episodes: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let side = parse_side(split)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let shots = if shots.is_empty() {
        vec![ckpt.configs.train.k_shots]
    } else {
        shots.to_vec()
    };
    let mut reports = Vec::new();
    for &setting in settings {
        for &k in &shots {
            reports.push(evaluate(&ckpt, side, setting, k, episodes, seed)?);
        }
    }
    let dir = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    create_dir(&dir)?;
    write(&dir.join("metrics.json"), serde_json::to_string_pretty(&reports)?)?;
    let csv = report_csv(&reports);
    write(&dir.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_ablate(suite: AblationSuite, cfg: &ConfigArgs, seeds: &[u64], episodes: usize) -> Result<(), Failure> {
    let run = resolve(cfg, &[])?;
    let dir = run.out_dir.join(format!("ablate-{suite}"));
    create_dir(&dir)?;
    write_config(&dir, &run)?;
    let spec = EvalSpec {
        n_episodes: episodes,
        ..EvalSpec::default()
    };
    let mut runner = Runner::with_progress(|msg| eprintln!("{msg}")).with_cache_dir(run.out_dir.join("cache"));
    let table = run_ablation(suite, &run.configs(), seeds, &spec, &mut runner);
    write(&dir.join("table.json"), serde_json::to_string_pretty(&table)?)?;
    write(&dir.join("table.csv"), table.to_csv())?;
    write(&dir.join("plot_data.csv"), table.plot_data_csv())?;
    print!("{}", table.to_csv());
    for f in &table.failures {
        eprintln!("arm {} seed {} failed: {}", f.arm, f.seed, f.error);
    }
    if table.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Error(Error::Ablation(format!("{} arm runs failed", table.failures.len()))))
    }
}

fn cmd_verify_mask(
    kind: MaskKind,
    shots: usize,
    layers: usize,
    t: usize,
    v: usize,
    m: usize,
) -> Result<(), Failure> {
    if layers == 0 {
        return Err(Failure::Usage("--layers must be at least 1".into()));
    }
    let layout = build_layout(t, v, m, shots)?;
    let mask = build_mask(&layout, kind);
    if let Some(row) = mask.first_empty_row() {
        return Err(Error::FullyMaskedRow { row }.into());
    }
    let report = reachability_report(&mask, &layout, layers);
    let json = serde_json::json!({
        "mask": kind.to_string(),
        "shots": shots,
        "layers": layers,
        "instr_tokens": t,
        "visual_tokens": v,
        "manip_tokens": m,
        "report": report,
    });
    println!("{}", serde_json::to_string_pretty(&json)?);
    if report.manip_is_vertex_cut {
        Ok(())
    } else {
        eprintln!("manipulation tokens are not a vertex cut: context reaches query/gen directly");
        Err(Failure::Verify)
    }
}

fn cmd_gen_episodes(
    cfg: &ConfigArgs,
    count: usize,
    split: &str,
    setting: Setting,
    shots: usize,
    seed: u64,
) -> Result<(), Failure> {
    let side = parse_side(split)?;
    let run = resolve(cfg, &[])?;
    let world = run.validate()?;
    let dir = run.out_dir.join("episodes");
    create_dir(&dir)?;
    for i in 0..count {
        let record = sample_record(&world.split, side, setting, shots, seed.wrapping_add(i as u64), world.config.grid)?;
        write(&dir.join(format!("episode_{i:05}.json")), serde_json::to_string_pretty(&record)?)?;
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_plot_data(table: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(table).map_err(|e| Error::io(table, e))?;
    let table: AblationTable = serde_json::from_str(&text)?;
    let csv = table.plot_data_csv();
    match out {
        Some(p) => write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

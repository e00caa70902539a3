use std::path::Path;
use std::process::{Command, Output};

use gsai::config::{parse_config, RunConfig};
use gsai::eval::AblationTable;
use gsai::task::EpisodeRecord;

const SMALL: &str = "\
[model]
n_blocks = 1
model_dim = 8
n_heads = 2
manip_tokens = 2
instr_tokens = 1
mlp_hidden = 16

[train]
steps = 4
batch_size = 2
warmup_steps = 1
";

fn gsai(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsai"))
        .args(args)
        .env("GSA_OUT_DIR", out_root)
        .output()
        .expect("binary runs")
}

fn small_cfg(dir: &Path) -> String {
    let p = dir.join("small.cfg");
    std::fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

#[test]
fn verify_mask_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = gsai(&["verify-mask", "--mask", "group", "--shots", "3", "--layers", "4"], tmp.path());
    assert_eq!(ok.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(json["report"]["manip_is_vertex_cut"], true);
    assert_eq!(json["report"]["context_reaches_gen"], true);

    let bad = gsai(&["verify-mask", "--mask", "causal"], tmp.path());
    assert_eq!(bad.status.code(), Some(3));
    let json: serde_json::Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(json["report"]["manip_is_vertex_cut"], false);
}

#[test]
fn error_paths_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| gsai(args, tmp.path()).status.code();
    assert_eq!(code(&[]), Some(1));
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["verify-mask", "--mask", "banded"]), Some(1));
    assert_eq!(code(&["train", "--set", "model.depth=3"]), Some(1));
    assert_eq!(code(&["train", "--set", "train.alpha=much"]), Some(1));
    assert_eq!(code(&["train", "--set", "model.n_heads=5"]), Some(1));
    assert_eq!(code(&["train", "--config", "/definitely/not/here.cfg"]), Some(2));
    assert_eq!(code(&["verify-mask", "--visual-tokens", "0"]), Some(2));
    assert_eq!(code(&["eval", "--checkpoint", "/definitely/not/here.gsai"]), Some(2));
    assert_eq!(code(&["--help"]), Some(0));
}

#[test]
fn train_twice_gives_identical_logs_and_a_self_describing_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_cfg(tmp.path());
    for name in ["a", "b"] {
        let out = gsai(&["train", "--config", &cfg, "--seed", "1", "--name", name], tmp.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let log_a = std::fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    assert_eq!(log_a.lines().count(), 4);
    assert_eq!(log_a, std::fs::read_to_string(b.join("train_log.jsonl")).unwrap());
    assert_eq!(
        std::fs::read(a.join("checkpoint.gsai")).unwrap(),
        std::fs::read(b.join("checkpoint.gsai")).unwrap()
    );

    // The stored config alone reproduces the run's settings.
    let resolved = parse_config(Some(&a.join("config.cfg")), &[], None).unwrap();
    assert_eq!(resolved.train.seed, 1);
    assert_eq!(resolved.model.seed, 1);
    assert_eq!(resolved.model.n_blocks, 1);
    let json: RunConfig = serde_json::from_str(&std::fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(json, resolved);

    let eval = gsai(
        &["eval", "--checkpoint", &a.join("checkpoint.gsai").display().to_string(), "--episodes", "4"],
        tmp.path(),
    );
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);
    assert!(std::fs::read_to_string(a.join("metrics.csv")).unwrap().starts_with("split,setting"));
}

#[test]
fn out_dir_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let env_root = tmp.path().join("env");
    let flag_root = tmp.path().join("flag");
    let cfg = small_cfg(tmp.path());
    let args = ["gen-episodes", "--config", cfg.as_str(), "--count", "1"];
    assert_eq!(gsai(&args, &env_root).status.code(), Some(0));
    assert!(env_root.join("episodes/episode_00000.json").exists());

    let file_root = tmp.path().join("file");
    let with_out = tmp.path().join("with_out.cfg");
    std::fs::write(&with_out, format!("out_dir = {}\n{SMALL}", file_root.display())).unwrap();
    let w = with_out.display().to_string();
    assert_eq!(gsai(&["gen-episodes", "--config", &w, "--count", "1"], &env_root).status.code(), Some(0));
    assert!(file_root.join("episodes/episode_00000.json").exists());

    let f = flag_root.display().to_string();
    assert_eq!(gsai(&["gen-episodes", "--config", &w, "--count", "1", "--out", &f], &env_root).status.code(), Some(0));
    assert!(flag_root.join("episodes/episode_00000.json").exists());
}

#[test]
fn gen_episodes_writes_loadable_records() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gsai(
        &["gen-episodes", "--count", "5", "--split", "test", "--setting", "out_dist_diverse", "--shots", "3"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for i in 0..5 {
        let text = std::fs::read_to_string(tmp.path().join(format!("episodes/episode_{i:05}.json"))).unwrap();
        let rec: EpisodeRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(rec.k, 3);
        assert!(gsai::task::Episode::from_record(&rec).is_ok());
    }
    let too_many = gsai(&["gen-episodes", "--setting", "out_dist_diverse", "--shots", "9"], tmp.path());
    assert_eq!(too_many.status.code(), Some(2));
}

#[test]
fn ablate_then_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_cfg(tmp.path());
    let out = gsai(&["ablate", "components", "--config", &cfg, "--seeds", "0,1", "--episodes", "2"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("ablate-components");
    let table: AblationTable = serde_json::from_str(&std::fs::read_to_string(dir.join("table.json")).unwrap()).unwrap();
    assert!(table.failures.is_empty());
    assert_eq!(table.rows.len(), 3 * 2 * 2);

    let plot = tmp.path().join("plot.csv");
    let p = plot.display().to_string();
    let t = dir.join("table.json").display().to_string();
    assert_eq!(gsai(&["plot-data", "--table", &t, "--out", &p], tmp.path()).status.code(), Some(0));
    let csv = std::fs::read_to_string(&plot).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "suite,arm,setting,k_shots,metric,value,seed");
    assert_eq!(csv.lines().count(), 1 + 12 * 5);
    assert_eq!(csv, std::fs::read_to_string(dir.join("plot_data.csv")).unwrap());

    // A second run loads every arm from the cache.
    let again = gsai(&["ablate", "components", "--config", &cfg, "--seeds", "0,1", "--episodes", "2"], tmp.path());
    assert_eq!(again.status.code(), Some(0));
    assert!(!String::from_utf8_lossy(&again.stderr).contains("training"));
}

//! Plain-text run configuration.
//!
//! ```text
//! # full-line comments start with '#'
//! out_dir = runs/toy          top-level keys come before any section
//!
//! [model]
//! n_blocks = 4
//! mask_kind = causal
//!
//! [train]
//! alpha = 0.1
//!
//! [task]
//! holdout = HUE_SHIFT/3, CONTRAST/1     lists are comma-separated; empty means []
//! ```
//!
//! Every key names a field of [`ModelConfig`], [`TrainConfig`] or
//! [`TaskConfig`]; unknown keys and values of the wrong type are rejected with
//! the key in the message. Values are taken verbatim after trimming, so
//! strings cannot carry leading or trailing whitespace or commas inside lists.
//!
//! Precedence is defaults ← file ← overrides. Overrides use dotted keys,
//! `train.alpha=0.2`, or the bare top-level key `out_dir=...`. The default
//! output root is `$GSA_OUT_DIR`, or `runs` when that is unset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::task::{TaskConfig, TaskWorld};
use crate::train::{ConfigSet, TrainConfig};

pub const OUT_DIR_ENV: &str = "GSA_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";

const SECTIONS: [&str; 3] = ["model", "train", "task"];

/// A fully resolved run: every field has a value before anything runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
}

impl RunConfig {
    /// Defaults, with the output root taken from `env_out_dir` when given.
    pub fn defaults(env_out_dir: Option<&str>) -> Self {
        RunConfig {
            out_dir: PathBuf::from(env_out_dir.unwrap_or(DEFAULT_OUT_DIR)),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: TaskConfig::default(),
        }
    }

    pub fn configs(&self) -> ConfigSet {
        ConfigSet {
            model: self.model.clone(),
            train: self.train.clone(),
            task: self.task.clone(),
        }
    }

    pub fn validate(&self) -> Result<TaskWorld> {
        self.configs().validate()
    }

    /// Renders the config in the file grammar; parsing the result gives
    /// back an equal config.
    pub fn to_cfg_string(&self) -> Result<String> {
        let tree = serde_json::to_value(self)?;
        let mut out = format!("out_dir = {}\n", self.out_dir.display());
        for section in SECTIONS {
            out.push_str(&format!("\n[{section}]\n"));
            for (key, value) in tree[section].as_object().into_iter().flatten() {
                out.push_str(&format!("{key} = {}\n", render(value)));
            }
        }
        Ok(out)
    }
}

fn render(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

/// Parses config text on top of `base`, then applies `overrides`, then
/// validates the result.
pub fn parse_config_str(text: &str, overrides: &[String], base: RunConfig) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(&base)?;
    let mut section: Option<&str> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::ConfigSyntax(format!("line {}: unclosed section header", lineno + 1)))?
                .trim();
            section = Some(
                SECTIONS
                    .into_iter()
                    .find(|s| *s == name)
                    .ok_or_else(|| Error::ConfigSyntax(format!("line {}: unknown section [{name}]", lineno + 1)))?,
            );
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::ConfigSyntax(format!("line {}: expected key = value", lineno + 1)))?;
        let key = key.trim();
        let path = match section {
            Some(s) => format!("{s}.{key}"),
            None => key.to_string(),
        };
        assign(&mut tree, &path, value.trim())?;
    }
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| Error::ConfigSyntax(format!("override `{o}` is not key=value")))?;
        assign(&mut tree, key.trim(), value.trim())?;
    }
    let run: RunConfig = serde_json::from_value(tree)?;
    run.validate()?;
    Ok(run)
}

/// Reads `path` (or starts from defaults when `None`) and applies overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String], env_out_dir: Option<&str>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides, RunConfig::defaults(env_out_dir))
}

fn assign(tree: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut parts = path.split('.');
    let slot = match (parts.next(), parts.next(), parts.next()) {
        (Some(key), None, _) if key != "model" && key != "train" && key != "task" => tree.get_mut(key),
        (Some(section), Some(key), None) if SECTIONS.contains(&section) => tree[section].get_mut(key),
        _ => None,
    }
    .ok_or_else(|| Error::UnknownKey(path.to_string()))?;

    let type_err = |expected: String| Error::ConfigType {
        key: path.to_string(),
        expected,
        value: raw.to_string(),
    };
    let new = match &*slot {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| type_err("true or false".into()))?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| type_err("a non-negative integer".into()))?),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| type_err("a number".into()))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| type_err("a finite number".into()))?
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Value::String(s.to_string()))
                .collect(),
        ),
        Value::Null | Value::Object(_) => return Err(Error::UnknownKey(path.to_string())),
    };
    *slot = new;
    // Enum spellings and list elements are only checked by deserializing.
    if let Err(e) = serde_json::from_value::<RunConfig>(tree.clone()) {
        return Err(type_err(e.to_string()));
    }
    Ok(())
}

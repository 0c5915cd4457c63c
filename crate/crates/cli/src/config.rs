//! Run configuration files.
//!
//! A config is one JSON object. The run-level keys `output_dir`, `seeds`,
//! `deterministic` and `arms` sit beside the training keys (`fusion_mode`,
//! `epsilon_ignore`, `scene`, `schedule`, ...). Unknown keys are rejected
//! with the path of the offending object.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use asff_core::train::{TrainConfig, TrainFusion};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

const RUN_KEYS: [&str; 4] = ["output_dir", "seeds", "deterministic", "arms"];

/// One entry of a comparison: a fusion mode, an optional ignore ratio and
/// extra dotted-path overrides for that arm only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub fusion_mode: TrainFusion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_ignore: Option<f64>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub overrides: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunSettings {
    output_dir: PathBuf,
    seeds: Vec<u64>,
    deterministic: bool,
    arms: Vec<Arm>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings { output_dir: PathBuf::from("runs"), seeds: vec![0], deterministic: false, arms: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    pub arms: Vec<Arm>,
    /// Training settings shared by every run; `seed` is set per run.
    pub train: TrainConfig,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Splits `--a.b.c=value` into a path and a JSON value. Values that do not
/// parse as JSON are taken as strings, so `--fusion_mode=sum` works unquoted.
pub fn parse_override(arg: &str) -> CliResult<(String, Value)> {
    let body = arg.strip_prefix("--").ok_or_else(|| config_err(format!("override `{arg}` must start with --")))?;
    let (key, raw) = body.split_once('=').ok_or_else(|| config_err(format!("override `{arg}` needs the form --key.path=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(config_err(format!("override `{arg}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((key.to_owned(), value))
}

/// Sets `path` (dot separated) inside `root`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> CliResult<()> {
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (depth, seg) in segments.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_err(format!("{}: cannot set a field inside a non-object value", segments[..depth].join("."))))?;
        if depth + 1 == segments.len() {
            obj.insert((*seg).to_owned(), value);
            return Ok(());
        }
        node = obj.entry((*seg).to_owned()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one segment")
}

fn deserialize_at<T: DeserializeOwned>(value: Value) -> CliResult<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        config_err(format!("{path}: {}", e.into_inner()))
    })
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies overrides in order and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> CliResult<Self> {
        let mut root = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: cannot read config: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| config_err(format!("{}: invalid JSON: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        for (key, value) in overrides {
            set_path(&mut root, key, value.clone())?;
        }
        Self::from_value(root)
    }

    pub fn from_value(root: Value) -> CliResult<Self> {
        let Value::Object(mut obj) = root else {
            return Err(config_err("top level must be a JSON object"));
        };
        if obj.contains_key("seed") {
            return Err(config_err("seed: not a config key, list run seeds under `seeds`"));
        }
        let mut run = Map::new();
        for key in RUN_KEYS {
            if let Some(v) = obj.remove(key) {
                run.insert(key.to_owned(), v);
            }
        }
        let settings: RunSettings = deserialize_at(Value::Object(run))?;
        let train: TrainConfig = deserialize_at(Value::Object(obj))?;
        let cfg = RunConfig { output_dir: settings.output_dir, seeds: settings.seeds, deterministic: settings.deterministic, arms: settings.arms, train };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds: at least one seed is required"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(config_err(format!("seeds: duplicate entries in {:?}", self.seeds)));
        }
        self.train.validate().map_err(|e| config_err(e.to_string()))?;
        let mut labels = BTreeSet::new();
        for (k, arm) in self.arms.iter().enumerate() {
            self.arm_config(arm, self.seeds[0]).map_err(|e| match e {
                CliError::Config(m) => config_err(format!("arms[{k}]: {m}")),
                other => other,
            })?;
            if !labels.insert(arm_label(arm)) {
                return Err(config_err(format!("arms[{k}]: duplicate arm name `{}`", arm_label(arm))));
            }
        }
        Ok(())
    }

    /// The whole config as one JSON object, in the shape it is read.
    pub fn to_value(&self) -> Value {
        let mut obj = match serde_json::to_value(&self.train).expect("config serializes") {
            Value::Object(o) => o,
            _ => unreachable!("struct serializes to an object"),
        };
        obj.remove("seed");
        obj.insert("output_dir".into(), serde_json::to_value(&self.output_dir).expect("path serializes"));
        obj.insert("seeds".into(), serde_json::to_value(&self.seeds).expect("seeds serialize"));
        obj.insert("deterministic".into(), Value::Bool(self.deterministic));
        obj.insert("arms".into(), serde_json::to_value(&self.arms).expect("arms serialize"));
        Value::Object(obj)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    /// Training config for one arm: the shared settings with the arm's
    /// fusion mode, ignore ratio and overrides applied.
    pub fn arm_config(&self, arm: &Arm, seed: u64) -> CliResult<TrainConfig> {
        let mut v = serde_json::to_value(self.train_config(seed)).expect("config serializes");
        set_path(&mut v, "fusion_mode", serde_json::to_value(arm.fusion_mode).expect("enum serializes"))?;
        if let Some(eps) = arm.epsilon_ignore {
            set_path(&mut v, "epsilon_ignore", Value::from(eps))?;
        }
        for (key, value) in &arm.overrides {
            if key == "seed" {
                return Err(config_err("overrides.seed: seeds are set by the run, not per arm"));
            }
            set_path(&mut v, key, value.clone())?;
        }
        let cfg: TrainConfig = deserialize_at(v)?;
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    /// Single-seed copy recorded next to a run's outputs.
    pub fn resolved_for(&self, seed: u64, dir: &Path, train: &TrainConfig) -> Value {
        let mut v = RunConfig { output_dir: dir.to_owned(), seeds: vec![seed], arms: Vec::new(), train: train.clone(), ..self.clone() }.to_value();
        v.as_object_mut().expect("object").remove("arms");
        v
    }
}

/// Directory and table name of an arm: its `name`, else the fusion mode,
/// with the ratio appended for ignore arms.
pub fn arm_label(arm: &Arm) -> String {
    if let Some(n) = &arm.name {
        return n.clone();
    }
    let mode = serde_json::to_value(arm.fusion_mode).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    match (arm.fusion_mode, arm.epsilon_ignore) {
        (TrainFusion::Ignore, Some(eps)) => format!("{mode}_eps{eps}"),
        _ => mode,
    }
}

//! One training run in its own directory.

use std::fs;
use std::path::Path;

use asff_core::train::{train, EpochMetrics, TrainConfig};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn run_info(cfg: &TrainConfig, deterministic: bool, status: &str, history: &[EpochMetrics], error: Option<&str>) -> Value {
    json!({
        "tool": "asff-lab",
        "tool_version": TOOL_VERSION,
        "seed": cfg.seed,
        "fusion_mode": cfg.fusion_mode,
        "deterministic": deterministic,
        "status": status,
        "epochs_completed": history.len(),
        "final": history.last(),
        "error": error,
    })
}

/// Writes `resolved-config.json` and `run-info.json`, then trains into
/// `dir`. Returns the final epoch's metrics (`None` for a zero-epoch run).
pub fn run_one(run: &RunConfig, cfg: &TrainConfig, dir: &Path) -> CliResult<Option<EpochMetrics>> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_json(&dir.join("resolved-config.json"), &run.resolved_for(cfg.seed, dir, cfg))?;
    let info = dir.join("run-info.json");
    write_json(&info, &run_info(cfg, run.deterministic, "running", &[], None))?;
    match train(cfg, Some(dir)) {
        Ok(out) => {
            write_json(&info, &run_info(cfg, run.deterministic, "completed", &out.history, None))?;
            Ok(out.history.last().copied())
        }
        Err(e) => {
            let msg = e.to_string();
            let done = fs::read_to_string(dir.join("metrics.csv")).map(|s| s.lines().count().saturating_sub(1)).unwrap_or(0);
            let mut v = run_info(cfg, run.deterministic, "failed", &[], Some(&msg));
            v["epochs_completed"] = json!(done);
            write_json(&info, &v)?;
            Err(CliError::from(e))
        }
    }
}

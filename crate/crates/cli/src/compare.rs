//! Arms × seeds sweeps with per-arm medians.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use asff_core::train::{TrainConfig, TrainFusion};

use crate::config::{arm_label, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::run_one;

pub const COMPARE_HEADER: &str = "arm,seed,ap50,conflict_mean";
pub const SUMMARY_HEADER: &str = "arm,fusion_mode,epsilon_ignore,runs,failed,median_ap50,median_conflict_mean";

struct Job {
    arm: usize,
    label: String,
    cfg: TrainConfig,
}

#[derive(Clone, Copy, Debug)]
struct Row {
    ap50: f64,
    conflict_mean: f64,
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_compare(path: &Path, jobs: &[Job], results: &[Option<Result<Row, String>>]) -> CliResult<()> {
    let mut out = format!("{COMPARE_HEADER}\n");
    for (job, res) in jobs.iter().zip(results) {
        if let Some(Ok(r)) = res {
            let _ = writeln!(out, "{},{},{},{}", job.label, job.cfg.seed, r.ap50, r.conflict_mean);
        }
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

/// Runs every arm for every seed. Rows land in `compare.csv` in arm-major
/// order as runs finish; failures are reported after all runs end.
pub fn compare(run: &RunConfig, threads: usize) -> CliResult<()> {
    if run.arms.is_empty() {
        return Err(CliError::Config("arms: compare needs at least one arm".into()));
    }
    let mut jobs = Vec::new();
    for (a, arm) in run.arms.iter().enumerate() {
        for &seed in &run.seeds {
            jobs.push(Job { arm: a, label: arm_label(arm), cfg: run.arm_config(arm, seed)? });
        }
    }
    fs::create_dir_all(&run.output_dir).map_err(|e| CliError::io(&run.output_dir, e))?;
    let csv_path = run.output_dir.join("compare.csv");
    let results: Mutex<Vec<Option<Result<Row, String>>>> = Mutex::new(vec![None; jobs.len()]);
    write_compare(&csv_path, &jobs, &results.lock().unwrap())?;

    let workers = threads.clamp(1, jobs.len());
    log::info!("compare: {} runs on {workers} worker(s)", jobs.len());
    let next = AtomicUsize::new(0);
    let write_error: Mutex<Option<CliError>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(k) else { break };
                let dir = run.output_dir.join(&job.label).join(format!("seed-{}", job.cfg.seed));
                let res = match run_one(run, &job.cfg, &dir) {
                    Ok(Some(m)) => Ok(Row { ap50: m.ap50, conflict_mean: m.conflict_mean }),
                    Ok(None) => Err("no epochs trained".to_owned()),
                    Err(e) => Err(e.to_string()),
                };
                if let Err(e) = &res {
                    log::error!("{} seed {}: {e}", job.label, job.cfg.seed);
                }
                let mut guard = results.lock().unwrap();
                guard[k] = Some(res);
                if let Err(e) = write_compare(&csv_path, &jobs, &guard) {
                    write_error.lock().unwrap().get_or_insert(e);
                }
            });
        }
    });
    if let Some(e) = write_error.into_inner().unwrap() {
        return Err(e);
    }
    let results = results.into_inner().unwrap();

    // sum fusion is the eps = 0 end of the ignore sweep
    let eps_of = |a: usize| match run.arms[a].fusion_mode {
        TrainFusion::Ignore => run.arms[a].epsilon_ignore.unwrap_or(run.train.epsilon_ignore),
        _ => 0.0,
    };
    let mut order: Vec<usize> = (0..run.arms.len()).collect();
    order.sort_by(|a, b| eps_of(*a).total_cmp(&eps_of(*b)));
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for a in order {
        let rows: Vec<Row> = jobs.iter().zip(&results).filter(|(j, _)| j.arm == a).filter_map(|(_, r)| r.as_ref().and_then(|r| r.as_ref().ok().copied())).collect();
        let failed = jobs.iter().filter(|j| j.arm == a).count() - rows.len();
        let ap = median(&rows.iter().map(|r| r.ap50).collect::<Vec<_>>());
        let conflict = median(&rows.iter().map(|r| r.conflict_mean).collect::<Vec<_>>());
        let mode = serde_json::to_value(run.arms[a].fusion_mode).expect("enum serializes");
        let eps = match run.arms[a].fusion_mode {
            TrainFusion::Ignore => eps_of(a).to_string(),
            _ => String::new(),
        };
        let label = arm_label(&run.arms[a]);
        let _ = writeln!(summary, "{label},{},{eps},{},{failed},{},{}", mode.as_str().unwrap_or_default(), rows.len(), fmt_opt(ap), fmt_opt(conflict));
        println!("{label}: median ap50 {} conflict {} over {} run(s)", fmt_opt(ap), fmt_opt(conflict), rows.len());
    }
    let summary_path = run.output_dir.join("summary.csv");
    fs::write(&summary_path, summary).map_err(|e| CliError::io(&summary_path, e))?;

    let failures = results.iter().filter(|r| !matches!(r, Some(Ok(_)))).count();
    if failures > 0 {
        return Err(CliError::Runtime(format!("{failures} of {} runs failed; completed rows kept in {}", jobs.len(), csv_path.display())));
    }
    Ok(())
}

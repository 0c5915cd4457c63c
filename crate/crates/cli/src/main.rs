//! `asff-lab`: train, analyze, compare and export from JSON run configs.
//!
//! Any `--key.path=value` argument that is not a known flag overrides the
//! config field at that dotted path.

mod analyze;
mod compare;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use asff_core::detection::generate_scene;
use asff_core::detection::scene::dump_scene;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::Value;

use config::{parse_override, RunConfig};
use error::{CliError, CliResult};

pub const THREADS_ENV: &str = "ASFF_LAB_THREADS";

#[derive(Parser, Debug)]
#[command(name = "asff-lab", version, about = "Adaptive spatial feature fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run single-threaded.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run per configured seed.
    Train(ConfigArgs),
    /// Decompose the level-1 gradient of a checkpoint on one scene.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Supplies scene, thresholds and loss settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run every arm for every seed and summarize medians.
    Compare(ConfigArgs),
    /// Write synthetic scenes as PGM images with JSON box sidecars.
    Export {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value_t = 4)]
        count: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Separates dotted overrides from the arguments clap should see.
fn split_overrides(args: Vec<String>) -> CliResult<(Vec<String>, Vec<(String, Value)>)> {
    let cmd = Cli::command();
    let sub = args.get(1).and_then(|name| cmd.find_subcommand(name));
    let Some(sub) = sub else { return Ok((args, Vec::new())) };
    let known: Vec<String> = sub.get_arguments().filter_map(|a| a.get_long().map(str::to_owned)).chain(["help".to_owned()]).collect();
    let mut keep = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let is_override = arg
            .strip_prefix("--")
            .and_then(|body| body.split_once('='))
            .is_some_and(|(key, _)| !known.iter().any(|k| k == key));
        if is_override {
            overrides.push(parse_override(&arg)?);
        } else {
            keep.push(arg);
        }
    }
    Ok((keep, overrides))
}

fn thread_cap() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("{THREADS_ENV}: expected a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn load(args: &ConfigArgs, overrides: &[(String, Value)]) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref(), overrides)?;
    cfg.deterministic |= args.deterministic;
    Ok(cfg)
}

fn execute(command: Command, overrides: &[(String, Value)]) -> CliResult<()> {
    let threads = thread_cap()?;
    match command {
        Command::Train(args) => {
            let cfg = load(&args, overrides)?;
            for &seed in &cfg.seeds {
                let dir = if cfg.seeds.len() == 1 { cfg.output_dir.clone() } else { cfg.output_dir.join(format!("seed-{seed}")) };
                let m = run::run_one(&cfg, &cfg.train_config(seed), &dir)?;
                match m {
                    Some(m) => println!("seed {seed}: {} epochs, ap50 {:.4}, conflict {:.4} -> {}", m.epoch, m.ap50, m.conflict_mean, dir.display()),
                    None => println!("seed {seed}: initial checkpoint -> {}", dir.display()),
                }
            }
            Ok(())
        }
        Command::Analyze { checkpoint, scene_seed, out, config } => {
            let cfg = RunConfig::load(config.as_deref(), overrides)?;
            analyze::analyze(&checkpoint, scene_seed, &out, &cfg)
        }
        Command::Compare(args) => {
            let cfg = load(&args, overrides)?;
            compare::compare(&cfg, if cfg.deterministic { 1 } else { threads })
        }
        Command::Export { out, first_seed, count, config } => {
            let cfg = RunConfig::load(config.as_deref(), overrides)?;
            std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
            for seed in first_seed..first_seed + count {
                let scene = generate_scene(seed, &cfg.train.scene);
                dump_scene(&scene, &out, &format!("scene-{seed}"))?;
            }
            println!("{count} scene(s) -> {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = split_overrides(std::env::args().collect()).and_then(|(args, overrides)| {
        let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
        execute(cli.command, &overrides)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("asff-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

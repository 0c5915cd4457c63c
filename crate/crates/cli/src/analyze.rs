//! Gradient decomposition and fusion-weight maps for a checkpoint.

use std::fs;
use std::path::Path;

use asff_core::autograd::Graph;
use asff_core::consistency::{conflict_report, decompose, residuals, verify_eq6, AnalysisMode};
use asff_core::detection::scene::stack_images;
use asff_core::detection::{build_targets, generate_scene};
use asff_core::fusion::FusionMode;
use asff_core::model::ForwardOptions;
use asff_core::pgm::Pgm;
use asff_core::pyramid::{ResizeMode, NUM_LEVELS};
use asff_core::train::load_checkpoint;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::run::write_json;

pub const EQ6_TOLERANCE: f64 = 1e-8;

pub fn weight_map_name(target: usize, source: usize) -> String {
    format!("weights_to{}_from{}.pgm", target + 1, source + 1)
}

pub fn analyze(checkpoint: &Path, scene_seed: u64, out: &Path, run: &RunConfig) -> CliResult<()> {
    let state = load_checkpoint(checkpoint).map_err(|e| CliError::Config(format!("{}: {e}", checkpoint.display())))?;
    let model = state.model.cast::<f64>();
    let mcfg = model.config().clone();
    let scene = generate_scene(scene_seed, &run.train.scene);
    mcfg.layout.check_image_size(scene.size()).map_err(|e| CliError::Config(format!("scene.image_size: {e}")))?;
    let image = stack_images::<f64>(&[&scene])?;
    let targets = build_targets(&[&scene], &mcfg.layout, &run.train.thresholds)?;

    let mode = match mcfg.fusion {
        FusionMode::Asff => AnalysisMode::Asff,
        FusionMode::Sum => AnalysisMode::Sum,
        FusionMode::Concat => AnalysisMode::Concat,
    };
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let d = decompose(&model, &image, &targets, &run.train.loss, mode)?;
    let csv_path = out.join("conflict.csv");
    fs::write(&csv_path, d.to_csv(0)?).map_err(|e| CliError::io(&csv_path, e))?;
    let report = conflict_report(&d, &targets)?;

    let mut maps = Vec::new();
    if mcfg.fusion == FusionMode::Asff {
        let mut g = Graph::new();
        let bound = model.params().bind_constants(&mut g);
        let x = g.constant(image.clone());
        let outputs = model.forward(&mut g, &bound, x, ForwardOptions::default())?;
        let weights = outputs.fusion_weights.expect("adaptive model yields fusion weights");
        for (l, fw) in weights.iter().enumerate() {
            let w = g.value(fw.weights);
            let s = w.shape();
            for n in 0..NUM_LEVELS {
                let values: Vec<f64> = (0..s.h).flat_map(|i| (0..s.w).map(move |j| (i, j))).map(|(i, j)| w.at(0, n, i, j)).collect();
                let name = weight_map_name(l, n);
                Pgm::from_values(s.w, s.h, &values, 0.0, 1.0).write(&out.join(&name))?;
                maps.push(json!({"file": name, "target_level": l + 1, "source_level": n + 1, "width": s.w, "height": s.h}));
            }
        }
    }

    let identity = mcfg.resize == ResizeMode::Identity;
    let eq6 = match (mcfg.fusion, identity) {
        (FusionMode::Asff, true) => {
            let r = verify_eq6(&model, &image, &targets, &run.train.loss, EQ6_TOLERANCE)?;
            if !r.pass {
                log::warn!("weighted-upstream identity off by {:e}", r.max_abs_diff);
            }
            json!({"max_abs_diff": r.max_abs_diff, "tolerance": r.tolerance, "pass": r.pass})
        }
        _ => serde_json::Value::Null,
    };
    let resid = match (mcfg.fusion, identity) {
        (FusionMode::Asff, false) => {
            let r = residuals(&model, &image, &targets, &run.train.loss)?;
            json!({"lambda_path_max": r.lambda_path_max, "lambda_path_norm": r.lambda_path_norm, "jacobian_gain": r.jacobian_gain})
        }
        _ => serde_json::Value::Null,
    };
    let summary = json!({
        "checkpoint": checkpoint,
        "epoch": state.epoch,
        "fusion_mode": mcfg.fusion,
        "resize": mcfg.resize,
        "scene_seed": scene_seed,
        "image_size": scene.size(),
        "objects": scene.objects.len(),
        "level1_positives": report.positives,
        "mean_conflict": report.mean_conflict,
        "weight_maps": maps,
        "verify_eq6": eq6,
        "residuals": resid,
    });
    write_json(&out.join("summary.json"), &summary)?;
    log::info!("analysis of {} written to {}", checkpoint.display(), out.display());
    Ok(())
}

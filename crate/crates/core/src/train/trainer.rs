//! The epoch loop: fresh synthetic batches every epoch, a fixed validation
//! set, per-epoch AP50 and level-1 conflict, and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, TrainState};
use super::optim::{Sgd, SgdConfig};
use super::schedule::{lr_at, ScheduleConfig};
use crate::autograd::Graph;
use crate::consistency::{conflict_report, decompose, AnalysisMode};
use crate::detection::loss::{detection_loss, LossConfig};
use crate::detection::scene::{generate_scene, stack_images, SceneConfig, SyntheticScene};
use crate::detection::targets::{build_targets, LevelThresholds, TargetMaps};
use crate::detection::{decode_detections, evaluate_ap, DecodeConfig};
use crate::error::{Error, Result};
use crate::fusion::{apply_ignore_mask, FusionMode, IgnoreConfig, IgnoreMode};
use crate::model::{Detector, ForwardOptions, ModelConfig};
use crate::pyramid::NUM_LEVELS;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,lr,loss,ap50,conflict_mean";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainFusion {
    Asff,
    Sum,
    Concat,
    /// Sum fusion trained with adjacent-level ignore regions.
    Ignore,
}

impl TrainFusion {
    pub fn fusion(self) -> FusionMode {
        match self {
            TrainFusion::Asff => FusionMode::Asff,
            TrainFusion::Sum | TrainFusion::Ignore => FusionMode::Sum,
            TrainFusion::Concat => FusionMode::Concat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub fusion_mode: TrainFusion,
    /// Used by the `ignore` fusion mode only.
    pub epsilon_ignore: f64,
    pub ignore_mode: IgnoreMode,
    /// `model.fusion` is replaced by the one implied by `fusion_mode`.
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub thresholds: LevelThresholds,
    pub schedule: ScheduleConfig,
    pub optimizer: SgdConfig,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
    pub batch_size: usize,
    /// Fresh scenes drawn per epoch.
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Leading validation scenes used for the conflict measurement.
    pub conflict_scenes: usize,
    pub random_shapes: bool,
    pub shape_set: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            fusion_mode: TrainFusion::Asff,
            epsilon_ignore: 0.0,
            ignore_mode: IgnoreMode::Area,
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            thresholds: LevelThresholds::default(),
            schedule: ScheduleConfig::default(),
            optimizer: SgdConfig::default(),
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
            batch_size: 8,
            train_scenes: 256,
            val_scenes: 64,
            conflict_scenes: 16,
            random_shapes: false,
            shape_set: vec![48, 64, 80],
        }
    }
}

impl TrainConfig {
    /// The model config actually built for this run.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { fusion: self.fusion_mode.fusion(), ..self.model.clone() }
    }

    pub fn ignore_config(&self) -> IgnoreConfig {
        match self.fusion_mode {
            TrainFusion::Ignore => IgnoreConfig { epsilon_ignore: self.epsilon_ignore, mode: self.ignore_mode },
            _ => IgnoreConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.scene.validate()?;
        self.thresholds.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        IgnoreConfig { epsilon_ignore: self.epsilon_ignore, mode: self.ignore_mode }.validate()?;
        let layout = &self.model.layout;
        layout.check_image_size(self.scene.image_size)?;
        if self.batch_size == 0 || self.train_scenes == 0 || self.val_scenes == 0 {
            return Err(Error::Config("batch_size, train_scenes and val_scenes must be positive".into()));
        }
        if self.conflict_scenes > self.val_scenes {
            return Err(Error::Config(format!("conflict_scenes ({}) exceeds val_scenes ({})", self.conflict_scenes, self.val_scenes)));
        }
        if self.random_shapes {
            if self.shape_set.is_empty() {
                return Err(Error::Config("random_shapes needs a non-empty shape_set".into()));
            }
            for &s in &self.shape_set {
                layout.check_image_size(s)?;
                SceneConfig { image_size: s, ..self.scene.clone() }.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ap50: f64,
    pub conflict_mean: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.lr, self.loss, self.ap50, self.conflict_mean)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub state: TrainState,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for `(run seed, stream, a, b)`.
pub fn derive_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(mix(seed) ^ stream) ^ a) ^ b)
}

const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_SHAPE: u64 = 3;

pub fn validation_scenes(cfg: &TrainConfig) -> Vec<SyntheticScene> {
    (0..cfg.val_scenes as u64).map(|i| generate_scene(derive_seed(cfg.seed, STREAM_VAL, i, 0), &cfg.scene)).collect()
}

fn training_batch(cfg: &TrainConfig, epoch: usize, step: usize) -> Vec<SyntheticScene> {
    let mut scene = cfg.scene.clone();
    if cfg.random_shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHAPE, epoch as u64, step as u64));
        scene.image_size = cfg.shape_set[rng.random_range(0..cfg.shape_set.len())];
    }
    let first = step * cfg.batch_size;
    let last = (first + cfg.batch_size).min(cfg.train_scenes);
    (first..last).map(|i| generate_scene(derive_seed(cfg.seed, STREAM_TRAIN, epoch as u64, i as u64), &scene)).collect()
}

/// Targets for a batch, with the run's ignore regions applied.
pub fn batch_targets(scenes: &[&SyntheticScene], model: &ModelConfig, thresholds: &LevelThresholds, ignore: &IgnoreConfig) -> Result<TargetMaps> {
    let mut targets = build_targets(scenes, &model.layout, thresholds)?;
    let objects = targets.objects.clone();
    apply_ignore_mask(&mut targets, &objects, ignore);
    Ok(targets)
}

/// Gradient-free forward pass returning the three prediction maps.
pub fn predict(model: &Detector<f32>, image: &Tensor<f32>) -> Result<[Tensor<f32>; NUM_LEVELS]> {
    let mut g = Graph::new();
    let bound = model.params().bind_constants(&mut g);
    let x = g.constant(image.clone());
    let out = model.forward(&mut g, &bound, x, ForwardOptions::default())?;
    Ok(out.preds.map(|p| g.value(p).clone()))
}

pub fn evaluate_ap50(model: &Detector<f32>, scenes: &[SyntheticScene], decode: &DecodeConfig, batch_size: usize) -> Result<f64> {
    let mut dets = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch_size.max(1)) {
        let refs: Vec<&SyntheticScene> = chunk.iter().collect();
        let image = stack_images::<f32>(&refs)?;
        let preds = predict(model, &image)?;
        let size = refs[0].size();
        dets.extend(decode_detections([&preds[0], &preds[1], &preds[2]], model.config().layout.strides, size, decode));
        gts.extend(chunk.iter().map(SyntheticScene::boxes));
    }
    evaluate_ap(&dets, &gts, 0.5)
}

/// Mean level-1 conflict over positive cells, using the gradient the model
/// actually trains with.
pub fn mean_conflict(model: &Detector<f32>, scenes: &[&SyntheticScene], cfg: &TrainConfig) -> Result<f64> {
    if scenes.is_empty() {
        return Ok(0.0);
    }
    let image = stack_images::<f32>(scenes)?;
    let targets = batch_targets(scenes, model.config(), &cfg.thresholds, &cfg.ignore_config())?;
    let d = decompose(model, &image, &targets, &cfg.loss, AnalysisMode::native(model.fusion_mode()))?;
    Ok(conflict_report(&d, &targets)?.mean_conflict)
}

/// One SGD step on a batch; returns the batch loss.
pub fn train_step(state: &mut TrainState, scenes: &[&SyntheticScene], cfg: &TrainConfig, lr: f64) -> Result<f64> {
    let image = stack_images::<f32>(scenes)?;
    let targets = batch_targets(scenes, state.model.config(), &cfg.thresholds, &cfg.ignore_config())?;
    let mut g = Graph::new();
    let bound = state.model.params().bind(&mut g);
    let x = g.constant(image);
    let out = state.model.forward(&mut g, &bound, x, ForwardOptions::default())?;
    let loss = match detection_loss(&mut g, &out.preds, &targets, &cfg.loss) {
        Err(Error::Numeric { .. }) => return Err(Error::Diverged { epoch: state.epoch + 1, loss: f64::NAN }),
        other => other?,
    };
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Diverged { epoch: state.epoch + 1, loss: value });
    }
    g.backward(loss)?;
    let grads: Vec<Vec<f32>> = bound.ids().iter().map(|id| g.grad(*id).map(<[f32]>::to_vec).unwrap_or_default()).collect();
    state.optimizer.step(state.model.params_mut(), &grads, lr)?;
    if !state.model.params().iter().all(|(_, _, t)| t.is_finite()) {
        return Err(Error::Diverged { epoch: state.epoch + 1, loss: value });
    }
    Ok(value)
}

pub fn initial_state(cfg: &TrainConfig) -> Result<TrainState> {
    let model = Detector::new(&cfg.model_config(), cfg.seed)?;
    let optimizer = Sgd::new(model.params(), cfg.optimizer);
    Ok(TrainState { model, optimizer, epoch: 0, seed: cfg.seed })
}

/// Trains from scratch. With a run directory, writes `metrics.csv` (one row
/// per epoch), `initial.asff`, `last.asff` after every epoch and
/// `final.asff` at the end. A diverged loss aborts the run and leaves
/// `last.asff` at the last completed epoch.
pub fn train(cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = initial_state(cfg)?;
    let mut metrics = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_checkpoint(&state, &dir.join("initial.asff"))?;
            let path = dir.join("metrics.csv");
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "{METRICS_HEADER}").and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
            Some((path, w))
        }
        None => None,
    };

    let val = validation_scenes(cfg);
    let conflict_set: Vec<&SyntheticScene> = val.iter().take(cfg.conflict_scenes).collect();
    let steps = cfg.train_scenes.div_ceil(cfg.batch_size);
    let total = cfg.schedule.total_epochs;
    let mut history = Vec::with_capacity(total);
    for epoch in 0..total {
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for step in 0..steps {
            lr = lr_at(epoch as f64 + step as f64 / steps as f64, &cfg.schedule);
            let batch = training_batch(cfg, epoch, step);
            let refs: Vec<&SyntheticScene> = batch.iter().collect();
            loss_sum += train_step(&mut state, &refs, cfg, lr)?;
        }
        state.epoch = epoch + 1;
        let loss = loss_sum / steps as f64;
        let diverged = |e: Error| match e {
            Error::Numeric { .. } => Error::Diverged { epoch: epoch + 1, loss },
            other => other,
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            loss,
            ap50: evaluate_ap50(&state.model, &val, &cfg.decode, cfg.batch_size).map_err(diverged)?,
            conflict_mean: mean_conflict(&state.model, &conflict_set, cfg).map_err(diverged)?,
        };
        log::info!(
            "seed {} {:?} epoch {}/{}: lr {:.5} loss {:.4} ap50 {:.4} conflict {:.4}",
            cfg.seed,
            cfg.fusion_mode,
            m.epoch,
            total,
            m.lr,
            m.loss,
            m.ap50,
            m.conflict_mean
        );
        if let (Some((path, w)), Some(dir)) = (metrics.as_mut(), run_dir) {
            writeln!(w, "{}", m.csv_row()).and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
            save_checkpoint(&state, &dir.join("last.asff"))?;
        }
        history.push(m);
    }
    if let Some(dir) = run_dir {
        if total > 0 {
            save_checkpoint(&state, &dir.join("final.asff"))?;
        }
    }
    Ok(TrainOutcome { history, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(1, STREAM_TRAIN, 0, 0), derive_seed(1, STREAM_VAL, 0, 0));
        assert_ne!(derive_seed(1, STREAM_TRAIN, 0, 1), derive_seed(1, STREAM_TRAIN, 1, 0));
        assert_eq!(derive_seed(4, 2, 3, 1), derive_seed(4, 2, 3, 1));
    }

    #[test]
    fn ignore_only_in_ignore_mode() {
        let cfg = TrainConfig { epsilon_ignore: 0.5, ..TrainConfig::default() };
        assert_eq!(cfg.ignore_config().mode, IgnoreMode::Off);
        let cfg = TrainConfig { fusion_mode: TrainFusion::Ignore, ..cfg };
        assert_eq!(cfg.ignore_config(), IgnoreConfig::area(0.5));
        assert_eq!(cfg.model_config().fusion, FusionMode::Sum);
    }

    #[test]
    fn last_batch_may_be_short() {
        let cfg = TrainConfig { train_scenes: 10, batch_size: 4, ..TrainConfig::default() };
        assert_eq!(training_batch(&cfg, 0, 2).len(), 2);
    }

    #[test]
    fn random_shapes_vary_size() {
        let cfg = TrainConfig { random_shapes: true, ..TrainConfig::default() };
        cfg.validate().unwrap();
        let sizes: std::collections::BTreeSet<usize> = (0..30).map(|s| training_batch(&cfg, 0, s)[0].size()).collect();
        assert_eq!(sizes.into_iter().collect::<Vec<_>>(), vec![48, 64, 80]);
    }
}

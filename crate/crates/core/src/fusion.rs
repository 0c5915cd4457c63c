//! Adaptive spatial fusion of rescaled pyramid features, the two fixed
//! fusion baselines, and adjacent-level ignore regions.
//!
//! For target level `l` and rescaled inputs `x^{n->l}`:
//!
//! ```text
//! lambda^l_n = conv1x1(x^{n->l}; phi^l_n)          one scalar map per source
//! w^{n->l}   = softmax_n(lambda^l_n)               per position
//! y^l        = sum_n w^{n->l} * x^{n->l}           broadcast over channels
//! ```
//!
//! The weight maps are one scalar per position and are shared by every
//! feature channel.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, TensorId};
use crate::detection::targets::{cell_of, AssignedObject, TargetMaps};
use crate::error::{Axis, Error, Result};
use crate::params::{Bound, Init, ParamIdx, ParamStore};
use crate::pyramid::NUM_LEVELS;
use crate::tensor::{Real, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Asff,
    Sum,
    Concat,
}

/// 1×1 convs `phi^l_n : C_l -> 1` producing the pre-softmax maps.
/// Zero-initialised, so fusion starts as a plain average.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaParams {
    /// `[l][n] -> (weight, bias)`
    convs: [[(ParamIdx, ParamIdx); NUM_LEVELS]; NUM_LEVELS],
}

impl LambdaParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, channels: [usize; NUM_LEVELS]) -> Self {
        let convs = std::array::from_fn(|l| {
            std::array::from_fn(|n| {
                let prefix = format!("fusion.lambda.{}.from{}", l + 1, n + 1);
                (
                    store.add(format!("{prefix}.weight"), Shape::new(1, channels[l], 1, 1), Init::Zeros),
                    store.add(format!("{prefix}.bias"), Shape::new(1, 1, 1, 1), Init::Zeros),
                )
            })
        });
        LambdaParams { convs }
    }

    pub fn conv(&self, l: usize, n: usize) -> (ParamIdx, ParamIdx) {
        self.convs[l][n]
    }

    pub fn all(&self) -> impl Iterator<Item = ParamIdx> + '_ {
        self.convs.iter().flatten().flat_map(|(w, b)| [*w, *b])
    }
}

/// 1×1 convs `3 C_l -> C_l` restoring the channel count after concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatParams {
    convs: [(ParamIdx, ParamIdx); NUM_LEVELS],
}

impl ConcatParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, channels: [usize; NUM_LEVELS]) -> Self {
        let convs = std::array::from_fn(|l| {
            let c = channels[l];
            (
                store.add(format!("fusion.concat.{}.weight", l + 1), Shape::new(c, NUM_LEVELS * c, 1, 1), Init::Msra),
                store.add(format!("fusion.concat.{}.bias", l + 1), Shape::new(1, c, 1, 1), Init::Zeros),
            )
        });
        ConcatParams { convs }
    }

    pub fn conv(&self, l: usize) -> (ParamIdx, ParamIdx) {
        self.convs[l]
    }
}

/// Graph handles for one target level's fusion weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionWeights {
    pub level: usize,
    /// `(N, 3, H_l, W_l)`, pre-softmax.
    pub lambda_maps: TensorId,
    /// `(N, 3, H_l, W_l)`, channel `n` is `w^{n->l}`.
    pub weights: TensorId,
}

pub fn compute_fusion_weights<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    resized: &[TensorId; NUM_LEVELS],
    params: &LambdaParams,
    l: usize,
) -> Result<FusionWeights> {
    let s0 = g.shape(resized[0]);
    let mut maps = Vec::with_capacity(NUM_LEVELS);
    for (n, x) in resized.iter().enumerate() {
        let s = g.shape(*x);
        s.expect_axis(Axis::N, s0.n, "compute_fusion_weights")?;
        s.expect_axis(Axis::H, s0.h, "compute_fusion_weights")?;
        s.expect_axis(Axis::W, s0.w, "compute_fusion_weights")?;
        let (w, b) = params.conv(l, n);
        maps.push(g.conv2d(*x, bound.id(w), Some(bound.id(b)), 1, 0)?);
    }
    let lambda_maps = g.concat_channels(&maps)?;
    let weights = g.softmax_over_sources(lambda_maps)?;
    Ok(FusionWeights { level: l, lambda_maps, weights })
}

/// `y^l = sum_n w^{n->l} * x^{n->l}`. With `detach_weights` the weight maps
/// enter as constants and no gradient reaches the lambda convs.
pub fn fuse<T: Real>(g: &mut Graph<T>, resized: &[TensorId; NUM_LEVELS], weights: &FusionWeights, detach_weights: bool) -> Result<TensorId> {
    let w = if detach_weights { g.detach(weights.weights) } else { weights.weights };
    g.weighted_sum(resized, w)
}

pub fn fuse_baseline<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    resized: &[TensorId; NUM_LEVELS],
    mode: FusionMode,
    concat: Option<&ConcatParams>,
    l: usize,
) -> Result<TensorId> {
    match mode {
        FusionMode::Sum => {
            let ab = g.add(resized[0], resized[1])?;
            g.add(ab, resized[2])
        }
        FusionMode::Concat => {
            let params = concat.ok_or_else(|| Error::Config("concat fusion requires concat parameters".into()))?;
            let (w, b) = params.conv(l);
            let cat = g.concat_channels(resized)?;
            g.conv2d(cat, bound.id(w), Some(bound.id(b)), 1, 0)
        }
        FusionMode::Asff => Err(Error::invalid("fuse_baseline handles only sum and concat")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IgnoreMode {
    #[default]
    Off,
    /// Only the cell containing the object center.
    CenterOnly,
    /// Every cell overlapping the object box scaled by `epsilon_ignore`.
    Area,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IgnoreConfig {
    /// Width/height ratio of the ignored area to the object box.
    pub epsilon_ignore: f64,
    pub mode: IgnoreMode,
}

impl Default for IgnoreConfig {
    fn default() -> Self {
        IgnoreConfig { epsilon_ignore: 0.0, mode: IgnoreMode::Off }
    }
}

impl IgnoreConfig {
    pub fn area(epsilon_ignore: f64) -> Self {
        IgnoreConfig { epsilon_ignore, mode: IgnoreMode::Area }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon_ignore) {
            return Err(Error::Config(format!("epsilon_ignore must lie in [0, 1], got {}", self.epsilon_ignore)));
        }
        Ok(())
    }
}

/// Cells `(i, j)` of a `grid × grid` map at `stride` whose extent overlaps
/// `bbox` with positive area.
pub fn overlapped_cells(bbox: &crate::detection::BBox, stride: usize, grid: usize) -> impl Iterator<Item = (usize, usize)> {
    let s = stride as f64;
    let lo = |v: f64| ((v / s).floor().max(0.0) as usize).min(grid);
    let hi = |v: f64| ((v / s).ceil().max(0.0) as usize).min(grid);
    let (i0, i1, j0, j1) = (lo(bbox.y1), hi(bbox.y2), lo(bbox.x1), hi(bbox.x2));
    (i0..i1).flat_map(move |i| (j0..j1).map(move |j| (i, j)))
}

/// Zeroes the loss weight, at the two levels other than each object's
/// assigned level, inside that object's ignore area. Cells that are
/// positives for some object are never ignored, and the assigned level's
/// maps are never touched. `Area` mode with `epsilon_ignore == 0` is a no-op.
pub fn apply_ignore_mask(targets: &mut TargetMaps, objects: &[AssignedObject], cfg: &IgnoreConfig) {
    if cfg.mode == IgnoreMode::Off || (cfg.mode == IgnoreMode::Area && cfg.epsilon_ignore <= 0.0) {
        return;
    }
    for o in objects {
        for (m, lt) in targets.levels.iter_mut().enumerate() {
            if m == o.level {
                continue;
            }
            let grid = lt.shape.h;
            let cells: Vec<(usize, usize)> = match cfg.mode {
                IgnoreMode::CenterOnly => {
                    let (cx, cy) = o.bbox.center();
                    vec![cell_of(cx, cy, lt.stride, grid)]
                }
                IgnoreMode::Area => overlapped_cells(&o.bbox.scaled(cfg.epsilon_ignore), lt.stride, grid).collect(),
                IgnoreMode::Off => unreachable!(),
            };
            for (i, j) in cells {
                let idx = lt.shape.index(o.batch, 0, i, j);
                if lt.objectness[idx] == 0.0 {
                    lt.weight[idx] = 0.0;
                }
            }
        }
    }
}

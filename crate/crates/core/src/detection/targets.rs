//! Size-based level assignment and center-positive target maps.

use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use super::scene::SyntheticScene;
use crate::error::{Error, Result};
use crate::pyramid::{PyramidLayout, NUM_LEVELS};
use crate::tensor::Shape;

/// Bucket edges on `sqrt(box area)`. A size equal to an edge goes to the
/// lower (finer) level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelThresholds(pub [f64; NUM_LEVELS - 1]);

impl Default for LevelThresholds {
    fn default() -> Self {
        LevelThresholds([8.0, 16.0])
    }
}

impl LevelThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.0.windows(2).all(|w| w[0] < w[1]) && self.0[0] > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("level thresholds must be positive and strictly increasing, got {:?}", self.0)))
        }
    }
}

pub fn assign_level(bbox: &BBox, thresholds: &LevelThresholds) -> usize {
    let side = bbox.area().sqrt();
    thresholds.0.iter().position(|t| side <= *t).unwrap_or(NUM_LEVELS - 1)
}

pub fn assign_levels(objects: &[BBox], thresholds: &LevelThresholds) -> Vec<usize> {
    objects.iter().map(|b| assign_level(b, thresholds)).collect()
}

/// The feature cell `(row, col)` containing `(x, y)` at the given stride.
pub fn cell_of(x: f64, y: f64, stride: usize, grid: usize) -> (usize, usize) {
    let clamp = |v: f64| ((v / stride as f64).floor().max(0.0) as usize).min(grid - 1);
    (clamp(y), clamp(x))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignedObject {
    pub batch: usize,
    pub bbox: BBox,
    pub level: usize,
    pub cell: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    /// `(N, 1, H, W)`
    pub shape: Shape,
    pub stride: usize,
    /// 1 at positive cells, 0 elsewhere.
    pub objectness: Vec<f64>,
    /// Per-cell loss weight, 0 marks an ignored cell.
    pub weight: Vec<f64>,
    /// `(N, 4, H, W)` ground-truth box `x1, y1, x2, y2` at positive cells, 0 elsewhere.
    pub boxes: Vec<f64>,
}

impl LevelTargets {
    fn new(shape: Shape, stride: usize) -> Self {
        LevelTargets {
            shape,
            stride,
            objectness: vec![0.0; shape.numel()],
            weight: vec![1.0; shape.numel()],
            boxes: vec![0.0; shape.numel() * 4],
        }
    }

    pub fn positives(&self) -> usize {
        self.objectness.iter().filter(|v| **v > 0.5).count()
    }

    pub fn ignored(&self) -> usize {
        self.weight.iter().filter(|v| **v == 0.0).count()
    }

    pub fn gt_box(&self, n: usize, i: usize, j: usize) -> BBox {
        let s = self.shape.with_c(4);
        BBox::new(
            self.boxes[s.index(n, 0, i, j)],
            self.boxes[s.index(n, 1, i, j)],
            self.boxes[s.index(n, 2, i, j)],
            self.boxes[s.index(n, 3, i, j)],
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub levels: [LevelTargets; NUM_LEVELS],
    pub objects: Vec<AssignedObject>,
}

impl TargetMaps {
    pub fn batch(&self) -> usize {
        self.levels[0].shape.n
    }

    pub fn total_positives(&self) -> usize {
        self.levels.iter().map(LevelTargets::positives).sum()
    }
}

/// Marks the cell containing each object's center, at its assigned level, as
/// the single positive for that object. If two objects land on the same cell
/// the later one is dropped from the targets (and logged).
pub fn build_targets(scenes: &[&SyntheticScene], layout: &PyramidLayout, thresholds: &LevelThresholds) -> Result<TargetMaps> {
    let size = scenes.first().map(|s| s.size()).ok_or_else(|| Error::invalid("empty batch"))?;
    layout.check_image_size(size)?;
    let n = scenes.len();
    let mut levels: [LevelTargets; NUM_LEVELS] = std::array::from_fn(|l| {
        let grid = size / layout.strides[l];
        LevelTargets::new(Shape::new(n, 1, grid, grid), layout.strides[l])
    });
    let mut objects = Vec::new();
    for (b, scene) in scenes.iter().enumerate() {
        for o in &scene.objects {
            let level = assign_level(&o.bbox, thresholds);
            let lt = &mut levels[level];
            let (cx, cy) = o.bbox.center();
            let (i, j) = cell_of(cx, cy, lt.stride, lt.shape.h);
            let idx = lt.shape.index(b, 0, i, j);
            if lt.objectness[idx] > 0.0 {
                log::warn!("scene {}: two objects share cell ({i}, {j}) at level {}; keeping the first", scene.seed, level + 1);
                continue;
            }
            lt.objectness[idx] = 1.0;
            let bs = lt.shape.with_c(4);
            for (k, v) in [o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2].into_iter().enumerate() {
                lt.boxes[bs.index(b, k, i, j)] = v;
            }
            objects.push(AssignedObject { batch: b, bbox: o.bbox, level, cell: (i, j) });
        }
    }
    Ok(TargetMaps { levels, objects })
}

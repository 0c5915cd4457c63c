//! Synthetic single-class detection scenes: bright blobs of three size
//! classes on a noisy dark background.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use crate::error::{Error, Result};
use crate::pgm::Pgm;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobShape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// `[lo, hi)` of `sqrt(area)` in pixels for small, medium, large.
    pub size_ranges: [[f64; 2]; 3],
    /// Relative frequency of each size class.
    pub mixture: [f64; 3],
    /// Width/height ratio range; `sqrt(area)` is kept exact.
    pub aspect_range: [f64; 2],
    pub intensity_range: [f64; 2],
    pub noise_std: f64,
    /// Minimum free pixels between any two boxes.
    pub min_gap: f64,
    pub max_placement_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            min_objects: 1,
            max_objects: 8,
            size_ranges: [[4.0, 8.0], [8.0, 16.0], [16.0, 32.0]],
            mixture: [1.0, 1.0, 1.0],
            aspect_range: [0.8, 1.25],
            intensity_range: [0.35, 1.0],
            noise_std: 0.2,
            min_gap: 2.0,
            max_placement_retries: 100,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("scene: {m}")));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return err(format!("need 1 <= min_objects <= max_objects, got {}..{}", self.min_objects, self.max_objects));
        }
        if self.mixture.iter().any(|w| *w < 0.0 || !w.is_finite()) || self.mixture.iter().sum::<f64>() <= 0.0 {
            return err("mixture weights must be non-negative with positive sum".into());
        }
        for r in &self.size_ranges {
            if !(r[0] > 0.0 && r[1] > r[0]) {
                return err(format!("bad size range {r:?}"));
            }
        }
        let largest = self.size_ranges[2][1] * self.aspect_range[1].sqrt();
        if largest >= self.image_size as f64 {
            return err(format!("objects up to {largest:.1}px do not fit a {}px image", self.image_size));
        }
        if !(self.aspect_range[0] > 0.0 && self.aspect_range[1] >= self.aspect_range[0]) {
            return err(format!("bad aspect range {:?}", self.aspect_range));
        }
        Ok(())
    }

    pub fn mixture_probabilities(&self) -> [f64; 3] {
        let total: f64 = self.mixture.iter().sum();
        self.mixture.map(|w| w / total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox,
    pub size_class: SizeClass,
    pub shape: BlobShape,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    /// `(1, 1, S, S)` grayscale image.
    pub image: Tensor<f32>,
    pub objects: Vec<GtObject>,
}

impl SyntheticScene {
    pub fn size(&self) -> usize {
        self.image.shape().h
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

fn overlaps_with_gap(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.x1 < b.x2 + gap && b.x1 < a.x2 + gap && a.y1 < b.y2 + gap && b.y1 < a.y2 + gap
}

/// Deterministic for a fixed `(seed, cfg)`. Objects are placed largest first;
/// an object that cannot be placed within the retry budget is dropped, so a
/// scene may hold fewer objects than drawn.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size as f64;
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let classes = WeightedIndex::new(cfg.mixture).expect("validated mixture");

    let mut drawn: Vec<(SizeClass, f64, f64)> = (0..count)
        .map(|_| {
            let class = SizeClass::ALL[classes.sample(&mut rng)];
            let [lo, hi] = cfg.size_ranges[class.index()];
            let side = rng.random_range(lo..hi);
            let aspect = rng.random_range(cfg.aspect_range[0]..=cfg.aspect_range[1]);
            (class, side * aspect.sqrt(), side / aspect.sqrt())
        })
        .collect();
    drawn.sort_by(|a, b| (b.1 * b.2).total_cmp(&(a.1 * a.2)));

    let mut objects: Vec<GtObject> = Vec::with_capacity(count);
    for (class, w, h) in drawn {
        let mut placed = None;
        for _ in 0..cfg.max_placement_retries {
            let cx = rng.random_range(w / 2.0..=size - w / 2.0);
            let cy = rng.random_range(h / 2.0..=size - h / 2.0);
            let candidate = BBox::from_center(cx, cy, w, h);
            if objects.iter().all(|o| !overlaps_with_gap(&o.bbox, &candidate, cfg.min_gap)) {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(bbox) => {
                let shape = if rng.random_bool(0.5) { BlobShape::Rectangle } else { BlobShape::Ellipse };
                let intensity = rng.random_range(cfg.intensity_range[0]..=cfg.intensity_range[1]);
                objects.push(GtObject { bbox, size_class: class, shape, intensity });
            }
            None => log::debug!("scene {seed}: dropped a {class:?} object after {} retries", cfg.max_placement_retries),
        }
    }

    let image = render(&objects, cfg.image_size, cfg.noise_std, &mut rng);
    SyntheticScene { seed, image, objects }
}

fn render(objects: &[GtObject], size: usize, noise_std: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let normal = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    let mut pixels = vec![0.0f64; size * size];
    for o in objects {
        let b = &o.bbox;
        let (cx, cy) = b.center();
        let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
        let (y0, y1) = (b.y1.floor().max(0.0) as usize, (b.y2.ceil() as usize).min(size));
        let (x0, x1) = (b.x1.floor().max(0.0) as usize, (b.x2.ceil() as usize).min(size));
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = match o.shape {
                    BlobShape::Rectangle => px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2,
                    BlobShape::Ellipse => ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0,
                };
                if inside {
                    pixels[y * size + x] = o.intensity;
                }
            }
        }
    }
    let data = pixels.into_iter().map(|v| (v + normal.sample(rng)) as f32).collect();
    Tensor::from_vec(Shape::new(1, 1, size, size), data).expect("image volume")
}

/// Stacks scene images into one `(N, 1, S, S)` batch.
pub fn stack_images<T: Real>(scenes: &[&SyntheticScene]) -> Result<Tensor<T>> {
    let size = scenes.first().map(|s| s.size()).ok_or_else(|| Error::invalid("empty batch"))?;
    let mut data = Vec::with_capacity(scenes.len() * size * size);
    for s in scenes {
        if s.size() != size {
            return Err(Error::invalid(format!("mixed image sizes in one batch: {} vs {size}", s.size())));
        }
        data.extend(s.image.data().iter().map(|v| T::lit(*v as f64)));
    }
    Tensor::from_vec(Shape::new(scenes.len(), 1, size, size), data)
}

#[derive(Serialize, Deserialize)]
struct SceneSidecar {
    seed: u64,
    width: usize,
    height: usize,
    objects: Vec<GtObject>,
}

/// Writes `<stem>.pgm` (image mapped from `[0, 1]`) and `<stem>.json` with
/// the ground-truth boxes. Returns both paths.
pub fn dump_scene(scene: &SyntheticScene, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let size = scene.size();
    let values: Vec<f64> = scene.image.data().iter().map(|v| *v as f64).collect();
    let pgm_path = dir.join(format!("{stem}.pgm"));
    Pgm::from_values(size, size, &values, 0.0, 1.0).write(&pgm_path)?;
    let json_path = dir.join(format!("{stem}.json"));
    let sidecar = SceneSidecar { seed: scene.seed, width: size, height: size, objects: scene.objects.clone() };
    fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&json_path, e))?;
    Ok((pgm_path, json_path))
}

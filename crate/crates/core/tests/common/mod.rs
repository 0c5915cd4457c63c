#![allow(dead_code)]

use asff_core::autograd::{Graph, InterpMode, TensorId};
use asff_core::detection::scene::{BlobShape, GtObject, SizeClass, SyntheticScene};
use asff_core::detection::targets::{build_targets, LevelThresholds, TargetMaps};
use asff_core::detection::{loss::decode_box, BBox, LossConfig};
use asff_core::fusion::{apply_ignore_mask, compute_fusion_weights, fuse, IgnoreConfig, LambdaParams};
use asff_core::params::ParamStore;
use asff_core::pyramid::{resize_to_level, PyramidLayout, ResizeMode, ResizeParams, NUM_LEVELS};
use asff_core::tensor::{Real, Shape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: Shape, std: f64) -> Tensor<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| normal.sample(rng)).collect()).unwrap()
}

/// Distinct values spaced 0.05 apart, in random order, so that no max-pool
/// window has a near tie.
pub fn spaced_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let mut v: Vec<f64> = (0..shape.numel()).map(|k| k as f64 * 0.05 - 1.0).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).unwrap()
}

pub fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap()).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Conv1x1,
    Conv3x3S2,
    Bilinear2,
    Bilinear4,
    MaxPool2,
    Softmax,
    Fusion,
    Loss,
    /// The `from -> to` rescaling branch, parameters included.
    Resize { from: usize, to: usize },
}

impl Op {
    pub const ALL: [Op; 8] = [Op::Conv1x1, Op::Conv3x3S2, Op::Bilinear2, Op::Bilinear4, Op::MaxPool2, Op::Softmax, Op::Fusion, Op::Loss];

    pub fn name(self) -> &'static str {
        match self {
            Op::Conv1x1 => "conv 1x1",
            Op::Conv3x3S2 => "conv 3x3 stride 2",
            Op::Bilinear2 => "bilinear x2",
            Op::Bilinear4 => "bilinear x4",
            Op::MaxPool2 => "maxpool 2x2",
            Op::Softmax => "softmax over sources",
            Op::Fusion => "adaptive fusion",
            Op::Loss => "detection loss",
            Op::Resize { .. } => "resize branch",
        }
    }
}

/// One random operator instance: inputs in double precision, plus the
/// targets for the loss.
#[derive(Clone, Debug)]
pub struct Instance {
    pub op: Op,
    pub inputs: Vec<Tensor<f64>>,
    pub targets: Option<TargetMaps>,
}

fn dims(rng: &mut ChaCha8Rng, max_hw: usize) -> (usize, usize, usize, usize) {
    (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=max_hw), rng.random_range(1..=max_hw))
}

pub fn instance(op: Op, seed: u64) -> Instance {
    let mut r = rng(seed);
    let inputs = match op {
        Op::Conv1x1 | Op::Conv3x3S2 => {
            let (n, cin, h, w) = dims(&mut r, 8);
            let cout = r.random_range(1..=4);
            let k = if op == Op::Conv1x1 { 1 } else { 3 };
            vec![
                normal_tensor(&mut r, Shape::new(n, cin, h, w), 1.0),
                normal_tensor(&mut r, Shape::new(cout, cin, k, k), 0.5),
                normal_tensor(&mut r, Shape::new(1, cout, 1, 1), 0.5),
            ]
        }
        Op::Bilinear2 => {
            let (n, c, h, w) = dims(&mut r, 4);
            vec![normal_tensor(&mut r, Shape::new(n, c, h, w), 1.0)]
        }
        Op::Bilinear4 => {
            let (n, c, h, w) = dims(&mut r, 2);
            vec![normal_tensor(&mut r, Shape::new(n, c, h, w), 1.0)]
        }
        Op::MaxPool2 => {
            let (n, c, _, _) = dims(&mut r, 1);
            let (h, w) = (2 * r.random_range(1..=4), 2 * r.random_range(1..=4));
            vec![spaced_tensor(&mut r, Shape::new(n, c, h, w))]
        }
        Op::Softmax => {
            let (n, _, h, w) = dims(&mut r, 8);
            vec![normal_tensor(&mut r, Shape::new(n, NUM_LEVELS, h, w), 2.0)]
        }
        Op::Fusion => {
            let (n, c, h, w) = dims(&mut r, 8);
            let mut v: Vec<_> = (0..NUM_LEVELS).map(|_| normal_tensor(&mut r, Shape::new(n, c, h, w), 1.0)).collect();
            for _ in 0..NUM_LEVELS {
                v.push(normal_tensor(&mut r, Shape::new(1, c, 1, 1), 0.7));
                v.push(normal_tensor(&mut r, Shape::new(1, 1, 1, 1), 0.7));
            }
            v
        }
        Op::Loss => return loss_instance(&mut r),
        Op::Resize { from, to } => {
            let n = r.random_range(1..=2);
            let (c_from, c_to) = (r.random_range(1..=3), r.random_range(1..=3));
            let side = 8 >> from;
            let x_shape = Shape::new(n, c_from, side, side);
            let x = if to == from + 2 { spaced_tensor(&mut r, x_shape) } else { normal_tensor(&mut r, x_shape, 1.0) };
            let mut v = vec![x];
            if from != to {
                let k = if from > to { 1 } else { 3 };
                v.push(normal_tensor(&mut r, Shape::new(c_to, c_from, k, k), 0.5));
                v.push(normal_tensor(&mut r, Shape::new(1, c_to, 1, 1), 0.5));
            }
            v
        }
    };
    Instance { op, inputs, targets: None }
}

pub const LOSS_LAYOUT: PyramidLayout = PyramidLayout { channels: [4, 4, 4], strides: [2, 4, 8] };
pub const LOSS_IMAGE: usize = 8;
pub const LOSS_THRESHOLDS: LevelThresholds = LevelThresholds([2.5, 4.5]);

pub fn scene_from_boxes(boxes: &[BBox], size: usize) -> SyntheticScene {
    SyntheticScene {
        seed: 0,
        image: Tensor::zeros(Shape::new(1, 1, size, size)),
        objects: boxes
            .iter()
            .map(|b| GtObject { bbox: *b, size_class: SizeClass::Small, shape: BlobShape::Rectangle, intensity: 1.0 })
            .collect(),
    }
}

/// Minimum distance between any predicted and ground-truth box edge, in
/// pixels; negative when the boxes do not overlap.
fn edge_margin(p: [f64; 4], gt: &BBox) -> f64 {
    let [cx, cy, w, h] = p;
    let pe = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
    let ge = [gt.x1, gt.y1, gt.x2, gt.y2];
    let overlap = (pe[2].min(ge[2]) - pe[0].max(ge[0])).min(pe[3].min(ge[3]) - pe[1].max(ge[1]));
    let closest = pe.iter().zip(&ge).map(|(a, b)| (a - b).abs()).fold(f64::INFINITY, f64::min);
    overlap.min(closest)
}

fn loss_instance(r: &mut ChaCha8Rng) -> Instance {
    let n = r.random_range(1..=2);
    let scenes: Vec<SyntheticScene> = (0..n)
        .map(|_| {
            let k = r.random_range(1..=3);
            let boxes: Vec<BBox> = (0..k)
                .map(|_| {
                    let (w, h) = (r.random_range(1.5..7.0), r.random_range(1.5..7.0));
                    let (x, y) = (r.random_range(0.0..LOSS_IMAGE as f64 - w), r.random_range(0.0..LOSS_IMAGE as f64 - h));
                    BBox::new(x, y, x + w, y + h)
                })
                .collect();
            scene_from_boxes(&boxes, LOSS_IMAGE)
        })
        .collect();
    let refs: Vec<_> = scenes.iter().collect();
    let mut targets = build_targets(&refs, &LOSS_LAYOUT, &LOSS_THRESHOLDS).unwrap();
    if r.random_bool(0.5) {
        let objects = targets.objects.clone();
        apply_ignore_mask(&mut targets, &objects, &IgnoreConfig::area(0.5));
    }
    let log_clamp = LossConfig::default().log_size_clamp;
    let inputs = targets
        .levels
        .iter()
        .map(|lt| {
            let shape = Shape::new(n, 5, lt.shape.h, lt.shape.w);
            let mut p = Tensor::<f64>::zeros(shape);
            for b in 0..n {
                for i in 0..shape.h {
                    for j in 0..shape.w {
                        let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
                        p.data_mut()[shape.index(b, 0, i, j)] = sign * r.random_range(0.5..3.0);
                        let positive = lt.objectness[lt.shape.index(b, 0, i, j)] > 0.5;
                        let gt = lt.gt_box(b, i, j);
                        let t = loop {
                            let s = lt.stride as f64;
                            let t = if positive {
                                [
                                    r.random_range(-0.4..0.4),
                                    r.random_range(-0.4..0.4),
                                    (gt.width() / s).ln() + r.random_range(-0.4..0.4),
                                    (gt.height() / s).ln() + r.random_range(-0.4..0.4),
                                ]
                            } else {
                                [0.0, 0.0, 0.0, 0.0].map(|_: f64| r.random_range(-1.0..1.0))
                            };
                            if !positive || edge_margin(decode_box(t, i, j, lt.stride, log_clamp).0, &gt) > 0.25 {
                                break t;
                            }
                        };
                        for (k, v) in t.into_iter().enumerate() {
                            p.data_mut()[shape.index(b, 1 + k, i, j)] = v;
                        }
                    }
                }
            }
            p
        })
        .collect();
    Instance { op: Op::Loss, inputs, targets: Some(targets) }
}

/// Records `inst.op` on `g` with the given input values; returns the output
/// and the graph ids of the inputs, in order.
pub fn build<T: Real>(inst: &Instance, g: &mut Graph<T>, inputs: &[Tensor<T>]) -> asff_core::Result<(TensorId, Vec<TensorId>)> {
    match inst.op {
        Op::Conv1x1 | Op::Conv3x3S2 => {
            let ids: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let (stride, pad) = if inst.op == Op::Conv1x1 { (1, 0) } else { (2, 1) };
            Ok((g.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad)?, ids))
        }
        Op::Bilinear2 | Op::Bilinear4 => {
            let x = g.param(inputs[0].clone());
            let scale = if inst.op == Op::Bilinear2 { 2 } else { 4 };
            Ok((g.interpolate_bilinear(x, scale)?, vec![x]))
        }
        Op::MaxPool2 => {
            let x = g.param(inputs[0].clone());
            Ok((g.maxpool2(x)?, vec![x]))
        }
        Op::Softmax => {
            let x = g.param(inputs[0].clone());
            Ok((g.softmax_over_sources(x)?, vec![x]))
        }
        Op::Fusion => {
            let c = inputs[0].shape().c;
            let mut store = ParamStore::<T>::new(0);
            let lambda = LambdaParams::new(&mut store, [c; NUM_LEVELS]);
            for n in 0..NUM_LEVELS {
                let (w, b) = lambda.conv(0, n);
                store.set(w, inputs[NUM_LEVELS + 2 * n].data().to_vec())?;
                store.set(b, inputs[NUM_LEVELS + 2 * n + 1].data().to_vec())?;
            }
            let bound = store.bind(g);
            let xs: [TensorId; NUM_LEVELS] = std::array::from_fn(|n| g.param(inputs[n].clone()));
            let weights = compute_fusion_weights(g, &bound, &xs, &lambda, 0)?;
            let y = fuse(g, &xs, &weights, false)?;
            let mut ids = xs.to_vec();
            for n in 0..NUM_LEVELS {
                let (w, b) = lambda.conv(0, n);
                ids.extend([bound.id(w), bound.id(b)]);
            }
            Ok((y, ids))
        }
        Op::Loss => {
            let preds: [TensorId; NUM_LEVELS] = std::array::from_fn(|l| g.param(inputs[l].clone()));
            let targets = inst.targets.as_ref().expect("loss instance carries targets");
            Ok((asff_core::detection::detection_loss(g, &preds, targets, &LossConfig::default())?, preds.to_vec()))
        }
        Op::Resize { from, to } => {
            let mut channels = [1; NUM_LEVELS];
            channels[from] = inputs[0].shape().c;
            if from != to {
                channels[to] = inputs[1].shape().n;
            }
            let layout = PyramidLayout { channels, strides: [2, 4, 8] };
            let mut store = ParamStore::<T>::new(0);
            let params = ResizeParams::new(&mut store, &layout, ResizeMode::Real, InterpMode::Bilinear)?;
            if let Some((w, b)) = params.conv_params(from, to) {
                store.set(w, inputs[1].data().to_vec())?;
                store.set(b, inputs[2].data().to_vec())?;
            }
            let bound = store.bind(g);
            let x = g.param(inputs[0].clone());
            let y = resize_to_level(g, &bound, x, from, to, &params)?;
            let mut ids = vec![x];
            if let Some((w, b)) = params.conv_params(from, to) {
                ids.extend([bound.id(w), bound.id(b)]);
            }
            Ok((y, ids))
        }
    }
}

/// Central-difference check of every input of `inst`, run entirely in `T`.
///
/// The output is projected onto fixed random weights; the analytic gradient
/// is the seeded backward pass with those weights. The step is the cube root
/// of the machine epsilon. Returns the relative error of the full gradient,
/// every input concatenated.
pub fn grad_check<T: Real>(inst: &Instance, seed: u64) -> asff_core::Result<f64> {
    let inputs: Vec<Tensor<T>> = inst.inputs.iter().map(Tensor::cast).collect();
    let mut g = Graph::new();
    let (out, ids) = build(inst, &mut g, &inputs)?;
    let mut r = rng(seed);
    let proj: Vec<f64> = (0..g.shape(out).numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    g.backward_seeded(&[(out, proj.iter().map(|v| T::lit(*v)).collect())])?;
    let analytic: Vec<f64> = ids
        .iter()
        .zip(&inputs)
        .flat_map(|(id, t)| g.grad(*id).map(to_f64).unwrap_or_else(|| vec![0.0; t.shape().numel()]))
        .collect();

    let project = |xs: &[Tensor<T>]| -> asff_core::Result<f64> {
        let mut g = Graph::new();
        let (out, _) = build(inst, &mut g, xs)?;
        Ok(g.value(out).data().iter().zip(&proj).map(|(v, p)| v.to_f64().unwrap() * p).sum())
    };
    let h = T::epsilon().cbrt();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.clone();
    for k in 0..inputs.len() {
        for e in 0..inputs[k].shape().numel() {
            let x0 = inputs[k].data()[e];
            let (up, down) = (x0 + h, x0 - h);
            work[k].data_mut()[e] = up;
            let lp = project(&work)?;
            work[k].data_mut()[e] = down;
            let lm = project(&work)?;
            work[k].data_mut()[e] = x0;
            numeric.push((lp - lm) / (up - down).to_f64().unwrap());
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn small_scene_config() -> asff_core::detection::SceneConfig {
    asff_core::detection::SceneConfig {
        image_size: 32,
        max_objects: 4,
        size_ranges: [[3.0, 6.0], [6.0, 10.0], [10.0, 16.0]],
        ..Default::default()
    }
}

/// Identity-resize model (4 channels, stride 4 at every level) in double
/// precision, with a two-image batch of 32 px scenes and its targets.
pub fn identity_setup(
    fusion: asff_core::fusion::FusionMode,
    seed: u64,
) -> (asff_core::model::Detector<f64>, Tensor<f64>, TargetMaps) {
    let config = asff_core::model::ModelConfig::identity_test(4, 4, fusion);
    let model = asff_core::model::Detector::<f64>::new(&config, seed).unwrap();
    let scenes: Vec<_> = (0..2).map(|k| asff_core::detection::generate_scene(seed * 10 + k, &small_scene_config())).collect();
    let refs: Vec<_> = scenes.iter().collect();
    let image = asff_core::detection::scene::stack_images(&refs).unwrap();
    let targets = build_targets(&refs, &config.layout, &LevelThresholds::default()).unwrap();
    (model, image, targets)
}

/// Overwrites every lambda conv parameter with N(0, std^2) values.
pub fn randomize_lambda(model: &mut asff_core::model::Detector<f64>, seed: u64, std: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = model.lambda_params().expect("adaptive fusion model").all().collect();
    for p in ids {
        let s = model.params().get(p).shape();
        model.params_mut().set(p, normal_tensor(&mut r, s, std).into_data()).unwrap();
    }
}

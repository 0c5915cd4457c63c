mod common;

use asff_core::autograd::{Graph, TensorId};
use asff_core::detection::loss::loss_and_grads;
use asff_core::detection::targets::build_targets;
use asff_core::detection::{BBox, LevelThresholds, LossConfig};
use asff_core::error::Error;
use asff_core::fusion::{
    apply_ignore_mask, compute_fusion_weights, fuse, fuse_baseline, ConcatParams, FusionMode, FusionWeights, IgnoreConfig, IgnoreMode,
    LambdaParams,
};
use asff_core::params::ParamStore;
use asff_core::pyramid::{PyramidLayout, NUM_LEVELS};
use asff_core::tensor::{Shape, Tensor};
use common::{normal_tensor, rng, scene_from_boxes};

fn sources(seed: u64, shape: Shape) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    (0..NUM_LEVELS).map(|_| normal_tensor(&mut r, shape, 1.0)).collect()
}

fn leaves(g: &mut Graph<f64>, xs: &[Tensor<f64>]) -> [TensorId; NUM_LEVELS] {
    std::array::from_fn(|n| g.param(xs[n].clone()))
}

fn with_weights(g: &mut Graph<f64>, w: Tensor<f64>) -> FusionWeights {
    let id = g.constant(w);
    FusionWeights { level: 0, lambda_maps: id, weights: id }
}

#[test]
fn zero_lambda_params_give_uniform_weights() {
    let shape = Shape::new(2, 4, 5, 3);
    let mut store = ParamStore::<f64>::new(0);
    let lambda = LambdaParams::new(&mut store, [4; NUM_LEVELS]);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let xs = leaves(&mut g, &sources(1, shape));
    let fw = compute_fusion_weights(&mut g, &bound, &xs, &lambda, 0).unwrap();
    assert_eq!(g.shape(fw.weights), Shape::new(2, 3, 5, 3));
    assert!(g.value(fw.weights).data().iter().all(|v| *v == 1.0 / 3.0));
}

#[test]
fn lambda_one_zero_zero_gives_softmax_values() {
    let mut store = ParamStore::<f64>::new(0);
    let lambda = LambdaParams::new(&mut store, [2; NUM_LEVELS]);
    let (_, b) = lambda.conv(0, 0);
    store.set(b, vec![1.0]).unwrap();
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let xs = leaves(&mut g, &sources(2, Shape::new(1, 2, 1, 1)));
    let fw = compute_fusion_weights(&mut g, &bound, &xs, &lambda, 0).unwrap();
    let lam = g.value(fw.lambda_maps).data().to_vec();
    assert_eq!(lam, vec![1.0, 0.0, 0.0]);
    for (w, e) in g.value(fw.weights).data().iter().zip([0.576117, 0.211942, 0.211942]) {
        assert!((w - e).abs() < 1e-5, "{w} vs {e}");
    }
}

#[test]
fn random_lambda_weights_are_normalized() {
    let shape = Shape::new(2, 3, 6, 6);
    let mut store = ParamStore::<f64>::new(0);
    let lambda = LambdaParams::new(&mut store, [3; NUM_LEVELS]);
    let mut r = rng(3);
    for p in lambda.all().collect::<Vec<_>>() {
        let s = store.get(p).shape();
        store.set(p, normal_tensor(&mut r, s, 2.0).into_data()).unwrap();
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let xs = leaves(&mut g, &sources(4, shape));
    for l in 0..NUM_LEVELS {
        let fw = compute_fusion_weights(&mut g, &bound, &xs, &lambda, l).unwrap();
        let w = g.value(fw.weights);
        for n in 0..2 {
            for i in 0..6 {
                for j in 0..6 {
                    let s: f64 = (0..3).map(|k| w.at(n, k, i, j)).sum();
                    assert!((s - 1.0).abs() <= 1e-6);
                    assert!((0..3).all(|k| (0.0..=1.0).contains(&w.at(n, k, i, j))));
                }
            }
        }
    }
}

#[test]
fn mismatched_resized_shapes_are_rejected() {
    let mut store = ParamStore::<f64>::new(0);
    let lambda = LambdaParams::new(&mut store, [2; NUM_LEVELS]);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let a = g.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let b = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 4)));
    assert!(matches!(compute_fusion_weights(&mut g, &bound, &[a, a, b], &lambda, 0), Err(Error::Dimension { .. })));
}

#[test]
fn hard_selector_weights_reproduce_each_source_bitwise() {
    let shape = Shape::new(2, 3, 4, 4);
    let xs = sources(5, shape);
    for k in 0..NUM_LEVELS {
        let mut g = Graph::new();
        let ids = leaves(&mut g, &xs);
        let fw = with_weights(&mut g, Tensor::from_fn(Shape::new(2, 3, 4, 4), |_, s, _, _| if s == k { 1.0 } else { 0.0 }));
        let y = fuse(&mut g, &ids, &fw, false).unwrap();
        assert_eq!(g.value(y).data(), xs[k].data());
    }
}

#[test]
fn uniform_weights_give_the_mean() {
    let shape = Shape::new(1, 4, 5, 5);
    let xs = sources(6, shape);
    let mut g = Graph::new();
    let ids = leaves(&mut g, &xs);
    let fw = with_weights(&mut g, Tensor::full(Shape::new(1, 3, 5, 5), 1.0 / 3.0));
    let y = fuse(&mut g, &ids, &fw, false).unwrap();
    let mean = Tensor::from_fn(shape, |n, c, i, j| (xs[0].at(n, c, i, j) + xs[1].at(n, c, i, j) + xs[2].at(n, c, i, j)) / 3.0);
    assert!(g.value(y).max_abs_diff(&mean) <= 1e-12);
}

#[test]
fn random_fusion_matches_loop_oracle() {
    let shape = Shape::new(2, 3, 4, 6);
    let xs = sources(7, shape);
    let w = normal_tensor(&mut rng(8), Shape::new(2, 3, 4, 6), 1.0);
    let mut g = Graph::new();
    let ids = leaves(&mut g, &xs);
    let fw = with_weights(&mut g, w.clone());
    let y = fuse(&mut g, &ids, &fw, false).unwrap();
    let oracle = Tensor::from_fn(shape, |n, c, i, j| (0..3).map(|k| w.at(n, k, i, j) * xs[k].at(n, c, i, j)).sum());
    assert!(g.value(y).max_abs_diff(&oracle) <= 1e-6);
}

#[test]
fn detached_weights_block_the_lambda_gradient() {
    let shape = Shape::new(1, 2, 3, 3);
    let mut store = ParamStore::<f64>::new(0);
    let lambda = LambdaParams::new(&mut store, [2; NUM_LEVELS]);
    for detach in [false, true] {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let xs = leaves(&mut g, &sources(9, shape));
        let fw = compute_fusion_weights(&mut g, &bound, &xs, &lambda, 0).unwrap();
        let y = fuse(&mut g, &xs, &fw, detach).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        let (w, _) = lambda.conv(0, 0);
        let grad_norm: f64 = g.grad(bound.id(w)).unwrap().iter().map(|v| v.abs()).sum();
        assert_eq!(grad_norm == 0.0, detach);
    }
}

#[test]
fn sum_with_two_zero_maps_returns_the_other() {
    let shape = Shape::new(1, 2, 3, 3);
    let x = normal_tensor(&mut rng(10), shape, 1.0);
    let mut g = Graph::new();
    let ids = leaves(&mut g, &[Tensor::zeros(shape), x.clone(), Tensor::zeros(shape)]);
    let store = ParamStore::<f64>::new(0);
    let bound = store.bind(&mut g);
    let y = fuse_baseline(&mut g, &bound, &ids, FusionMode::Sum, None, 0).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn sum_fusion_has_unit_gradient_to_every_source() {
    let shape = Shape::new(2, 2, 3, 3);
    let mut g = Graph::new();
    let ids = leaves(&mut g, &sources(11, shape));
    let store = ParamStore::<f64>::new(0);
    let bound = store.bind(&mut g);
    let y = fuse_baseline(&mut g, &bound, &ids, FusionMode::Sum, None, 0).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    for id in ids {
        assert!(g.grad(id).unwrap().iter().all(|v| *v == 1.0));
    }
}

#[test]
fn block_averaging_concat_equals_mean() {
    let c = 3;
    let shape = Shape::new(2, c, 4, 4);
    let mut store = ParamStore::<f64>::new(0);
    let concat = ConcatParams::new(&mut store, [c; NUM_LEVELS]);
    let (w, _) = concat.conv(0);
    let weights = Tensor::from_fn(Shape::new(c, 3 * c, 1, 1), |o, i, _, _| if i % c == o { 1.0 / 3.0 } else { 0.0 });
    store.set(w, weights.into_data()).unwrap();
    let xs = sources(12, shape);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let ids = leaves(&mut g, &xs);
    let y = fuse_baseline(&mut g, &bound, &ids, FusionMode::Concat, Some(&concat), 0).unwrap();
    let mean = Tensor::from_fn(shape, |n, c, i, j| (xs[0].at(n, c, i, j) + xs[1].at(n, c, i, j) + xs[2].at(n, c, i, j)) / 3.0);
    assert!(g.value(y).max_abs_diff(&mean) <= 1e-12);
}

#[test]
fn concat_without_params_is_a_config_error() {
    let mut g = Graph::<f64>::new();
    let store = ParamStore::<f64>::new(0);
    let bound = store.bind(&mut g);
    let x = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    assert!(matches!(fuse_baseline(&mut g, &bound, &[x, x, x], FusionMode::Concat, None, 0), Err(Error::Config(_))));
}

fn targets_for(boxes: &[BBox]) -> asff_core::detection::TargetMaps {
    let s = scene_from_boxes(boxes, 64);
    build_targets(&[&s], &PyramidLayout::default(), &LevelThresholds::default()).unwrap()
}

fn zeroed(t: &asff_core::detection::TargetMaps, level: usize) -> usize {
    t.levels[level].ignored()
}

#[test]
fn center_only_ignores_one_cell_per_other_level() {
    let mut t = targets_for(&[BBox::new(20.0, 20.0, 32.0, 32.0)]);
    let objects = t.objects.clone();
    assert_eq!(objects[0].level, 1);
    apply_ignore_mask(&mut t, &objects, &IgnoreConfig { epsilon_ignore: 0.5, mode: IgnoreMode::CenterOnly });
    assert_eq!([zeroed(&t, 0), zeroed(&t, 1), zeroed(&t, 2)], [1, 0, 1]);
}

/// Cells of a `grid × grid` map whose square extent overlaps `b` with
/// positive area.
fn rasterize(b: &BBox, stride: usize, grid: usize) -> usize {
    let s = stride as f64;
    let mut count = 0;
    for i in 0..grid {
        for j in 0..grid {
            let cell = BBox::new(j as f64 * s, i as f64 * s, (j + 1) as f64 * s, (i + 1) as f64 * s);
            if cell.intersection(b) > 0.0 {
                count += 1;
            }
        }
    }
    count
}

#[test]
fn area_ignore_matches_rasterization() {
    // 16 px object: two cells wide at its assigned stride of 8
    for bbox in [BBox::new(16.0, 16.0, 32.0, 32.0), BBox::new(21.0, 9.5, 37.0, 25.5)] {
        let mut t = targets_for(&[bbox]);
        let objects = t.objects.clone();
        assert_eq!(objects[0].level, 1);
        apply_ignore_mask(&mut t, &objects, &IgnoreConfig::area(0.5));
        let scaled = bbox.scaled(0.5);
        let layout = PyramidLayout::default();
        for l in [0, 2] {
            let grid = 64 / layout.strides[l];
            assert_eq!(zeroed(&t, l), rasterize(&scaled, layout.strides[l], grid), "level {l}");
        }
        assert_eq!(zeroed(&t, 1), 0);
    }
}

#[test]
fn ignored_cells_get_zero_gradient() {
    let mut t = targets_for(&[BBox::new(6.0, 6.0, 12.0, 12.0), BBox::new(20.0, 20.0, 34.0, 34.0), BBox::new(30.0, 30.0, 60.0, 60.0)]);
    let objects = t.objects.clone();
    apply_ignore_mask(&mut t, &objects, &IgnoreConfig::area(1.0));
    assert!(t.levels.iter().map(|lt| lt.ignored()).sum::<usize>() > 0);
    let mut r = rng(13);
    let preds: Vec<Tensor<f64>> = t.levels.iter().map(|lt| normal_tensor(&mut r, lt.shape.with_c(5), 1.0)).collect();
    let (_, _, grads) = loss_and_grads([&preds[0], &preds[1], &preds[2]], &t, &LossConfig::default()).unwrap();
    for (lt, g) in t.levels.iter().zip(&grads) {
        let s = lt.shape;
        for i in 0..s.h {
            for j in 0..s.w {
                let ignored = lt.weight[s.index(0, 0, i, j)] == 0.0;
                let zero = (0..5).all(|c| g[s.with_c(5).index(0, c, i, j)] == 0.0);
                if ignored {
                    assert!(zero, "ignored cell ({i}, {j}) has gradient");
                } else {
                    assert!(!zero);
                }
            }
        }
    }
}

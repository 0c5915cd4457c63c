mod common;

use asff_core::autograd::{Graph, InterpMode};
use asff_core::error::{Axis, Error};
use asff_core::params::ParamStore;
use asff_core::pyramid::{resize_to_level, PyramidLayout, ResizeMode, ResizeParams};
use asff_core::tensor::{Shape, Tensor};
use common::{normal_tensor, rng, spaced_tensor};

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, co, i, j| {
        let mut acc = b.at(0, co, 0, 0);
        for ci in 0..xs.c {
            for ki in 0..ws.h {
                for kj in 0..ws.w {
                    let y = (i * stride + ki) as isize - pad as isize;
                    let x_ = (j * stride + kj) as isize - pad as isize;
                    if y >= 0 && x_ >= 0 && (y as usize) < xs.h && (x_ as usize) < xs.w {
                        acc += w.at(co, ci, ki, kj) * x.at(n, ci, y as usize, x_ as usize);
                    }
                }
            }
        }
        acc
    })
}

fn bilinear_oracle(x: &Tensor<f64>, scale: usize) -> Tensor<f64> {
    let s = x.shape();
    let coord = |d: usize, size: usize| {
        let src = ((d as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (size - 1) as f64);
        let lo = src.floor() as usize;
        (lo, (lo + 1).min(size - 1), src - lo as f64)
    };
    Tensor::from_fn(Shape::new(s.n, s.c, s.h * scale, s.w * scale), |n, c, i, j| {
        let (y0, y1, fy) = coord(i, s.h);
        let (x0, x1, fx) = coord(j, s.w);
        (1.0 - fy) * (1.0 - fx) * x.at(n, c, y0, x0)
            + (1.0 - fy) * fx * x.at(n, c, y0, x1)
            + fy * (1.0 - fx) * x.at(n, c, y1, x0)
            + fy * fx * x.at(n, c, y1, x1)
    })
}

fn maxpool_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h / 2, s.w / 2), |n, c, i, j| {
        let mut m = f64::NEG_INFINITY;
        for di in 0..2 {
            for dj in 0..2 {
                m = m.max(x.at(n, c, 2 * i + di, 2 * j + dj));
            }
        }
        m
    })
}

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xi, wi, bi) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xi, wi, Some(bi), stride, pad).unwrap();
    g.value(y).detached()
}

#[test]
fn conv_with_zero_weights_outputs_zeros() {
    let x = normal_tensor(&mut rng(1), Shape::new(2, 3, 5, 4), 1.0);
    let y = run_conv(&x, &Tensor::zeros(Shape::new(2, 3, 1, 1)), &Tensor::zeros(Shape::new(1, 2, 1, 1)), 1, 0);
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn conv_with_identity_weights_reproduces_input() {
    let x = normal_tensor(&mut rng(2), Shape::new(2, 3, 5, 4), 1.0);
    let w = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
    let y = run_conv(&x, &w, &Tensor::zeros(Shape::new(1, 3, 1, 1)), 1, 0);
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_matches_nested_loop() {
    let mut r = rng(3);
    let x = normal_tensor(&mut r, Shape::new(1, 2, 5, 5), 1.0);
    let w = normal_tensor(&mut r, Shape::new(3, 2, 3, 3), 1.0);
    let b = normal_tensor(&mut r, Shape::new(1, 3, 1, 1), 1.0);
    let y = run_conv(&x, &w, &b, 2, 1);
    assert_eq!(y.shape(), Shape::new(1, 3, 3, 3));
    assert!(y.max_abs_diff(&conv_oracle(&x, &w, &b, 2, 1)) <= 1e-6);

    for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (3, 2, 0), (1, 2, 0)] {
        let x = normal_tensor(&mut r, Shape::new(2, 3, 7, 6), 1.0);
        let w = normal_tensor(&mut r, Shape::new(4, 3, k, k), 1.0);
        let b = normal_tensor(&mut r, Shape::new(1, 4, 1, 1), 1.0);
        let got = run_conv(&x, &w, &b, stride, pad);
        assert!(got.max_abs_diff(&conv_oracle(&x, &w, &b, stride, pad)) <= 1e-12, "k={k} s={stride} p={pad}");
    }
}

#[test]
fn conv_channel_mismatch_names_the_axis() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
    let w = g.constant(Tensor::zeros(Shape::new(2, 4, 1, 1)));
    match g.conv2d(x, w, None, 1, 0) {
        Err(Error::Dimension { axis, .. }) => assert_eq!(axis, Axis::C),
        other => panic!("expected a dimension error, got {other:?}"),
    }
}

#[test]
fn bilinear_preserves_constants() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(Shape::new(1, 2, 3, 5), 3.0));
    let y = g.interpolate_bilinear(x, 2).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 2, 6, 10));
    assert!(g.value(y).data().iter().all(|v| *v == 3.0));
}

#[test]
fn bilinear_single_pixel_broadcasts() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), -1.25));
    let y = g.interpolate_bilinear(x, 4).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 1, 4, 4));
    assert!(g.value(y).data().iter().all(|v| *v == -1.25));
}

#[test]
fn bilinear_matches_closed_form() {
    let mut r = rng(4);
    for (shape, scale) in [(Shape::new(1, 1, 3, 3), 2), (Shape::new(2, 3, 4, 2), 2), (Shape::new(1, 2, 3, 5), 4)] {
        let x = normal_tensor(&mut r, shape, 1.0);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = g.interpolate_bilinear(xi, scale).unwrap();
        assert!(g.value(y).max_abs_diff(&bilinear_oracle(&x, scale)) <= 1e-6);
    }
}

#[test]
fn bilinear_rejects_scale_one() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    assert!(matches!(g.upsample(x, 1, InterpMode::Bilinear), Err(Error::InvalidArgument(_))));
}

#[test]
fn maxpool_takes_window_max() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
}

#[test]
fn maxpool_tie_routes_gradient_to_first_element() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(Shape::new(1, 1, 2, 2), 0.7));
    let y = g.maxpool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.7]);
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_matches_window_scan() {
    let mut r = rng(5);
    for _ in 0..10 {
        let x = normal_tensor(&mut r, Shape::new(1, 2, 4, 4), 1.0);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = g.maxpool2(xi).unwrap();
        assert_eq!(g.value(y), &maxpool_oracle(&x));
    }
}

fn softmax_of(l: [f64; 3]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(Shape::new(1, 3, 1, 1), l.to_vec()).unwrap());
    let y = g.softmax_over_sources(x).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert!(softmax_of([0.0; 3]).iter().all(|v| *v == 1.0 / 3.0));

    let e = std::f64::consts::E;
    let expected = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
    let got = softmax_of([1.0, 0.0, 0.0]);
    for (a, b) in got.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in got.iter().zip([0.576117, 0.211942, 0.211942]) {
        assert!((a - b).abs() < 1e-5);
    }

    let got = softmax_of([1000.0, 0.0, 0.0]);
    assert!(got.iter().all(|v| v.is_finite()));
    assert_eq!(got, vec![1.0, 0.0, 0.0]);
}

#[test]
fn add_zeros_is_identity() {
    let x = normal_tensor(&mut rng(6), Shape::new(2, 2, 3, 3), 1.0);
    let mut g = Graph::new();
    let (a, z) = (g.constant(x.clone()), g.constant(Tensor::zeros(x.shape())));
    let y = g.add(a, z).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn weighted_sum_selector_and_loop_oracle() {
    let mut r = rng(7);
    let shape = Shape::new(2, 3, 4, 5);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| normal_tensor(&mut r, shape, 1.0)).collect();
    let select = Tensor::from_fn(Shape::new(2, 3, 4, 5), |_, k, _, _| if k == 0 { 1.0 } else { 0.0 });
    let weights = normal_tensor(&mut r, Shape::new(2, 3, 4, 5), 1.0);

    for (w, check_select) in [(select, true), (weights.clone(), false)] {
        let mut g = Graph::new();
        let ids: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let wi = g.constant(w.clone());
        let y = g.weighted_sum(&ids, wi).unwrap();
        let out = g.value(y);
        if check_select {
            assert_eq!(out.data(), xs[0].data());
            continue;
        }
        let oracle = Tensor::from_fn(shape, |n, c, i, j| (0..3).map(|k| w.at(n, k, i, j) * xs[k].at(n, c, i, j)).sum());
        assert!(out.max_abs_diff(&oracle) <= 1e-7);
    }
}

#[test]
fn weighted_sum_rejects_wrong_weight_count() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
    let w = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
    assert!(matches!(g.weighted_sum(&[a, a, a], w), Err(Error::Dimension { axis: Axis::C, .. })));
}

#[test]
fn backward_is_deterministic() {
    let mut r = rng(8);
    let x = normal_tensor(&mut r, Shape::new(2, 3, 8, 8), 1.0).cast::<f32>();
    let w = normal_tensor(&mut r, Shape::new(3, 3, 3, 3), 0.5).cast::<f32>();
    let mut g = Graph::new();
    let (xi, wi) = (g.param(x), g.param(w));
    let c = g.conv2d(xi, wi, None, 2, 1).unwrap();
    let up = g.interpolate_bilinear(c, 2).unwrap();
    let pooled = g.maxpool2(up).unwrap();
    let loss = g.sum(pooled).unwrap();
    g.backward(loss).unwrap();
    let first = (g.grad(xi).unwrap().to_vec(), g.grad(wi).unwrap().to_vec());
    g.backward(loss).unwrap();
    assert_eq!(first.0, g.grad(xi).unwrap());
    assert_eq!(first.1, g.grad(wi).unwrap());
}

fn resize_params(layout: &PyramidLayout, store: &mut ParamStore<f64>) -> ResizeParams {
    ResizeParams::new(store, layout, ResizeMode::Real, InterpMode::Bilinear).unwrap()
}

fn level_input(layout: &PyramidLayout, n: usize, seed: u64) -> Tensor<f64> {
    let side = 32 / layout.strides[n];
    normal_tensor(&mut rng(seed), Shape::new(2, layout.channels[n], side, side), 1.0)
}

#[test]
fn same_level_branch_returns_the_input_node() {
    let layout = PyramidLayout::default();
    let mut store = ParamStore::new(0);
    let params = resize_params(&layout, &mut store);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    for l in 0..3 {
        let x = g.constant(level_input(&layout, l, l as u64));
        assert_eq!(resize_to_level(&mut g, &bound, x, l, l, &params).unwrap(), x);
    }
}

#[test]
fn upsampling_a_constant_with_averaging_compression_stays_constant() {
    let layout = PyramidLayout::default();
    let mut store = ParamStore::new(0);
    let params = resize_params(&layout, &mut store);
    let (w, b) = params.conv_params(1, 0).unwrap();
    let (cl, cn) = (layout.channels[0], layout.channels[1]);
    store.set(w, vec![1.0 / cn as f64; cl * cn]).unwrap();
    store.set(b, vec![0.0; cl]).unwrap();
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let x = g.constant(Tensor::full(Shape::new(1, cn, 4, 4), 2.5));
    let y = resize_to_level(&mut g, &bound, x, 1, 0, &params).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, cl, 8, 8));
    assert!(g.value(y).data().iter().all(|v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn every_branch_matches_composed_oracles() {
    let layout = PyramidLayout::default();
    let mut store = ParamStore::new(11);
    let params = resize_params(&layout, &mut store);
    for (n, l) in [(1, 0), (2, 0), (2, 1), (0, 1), (1, 2), (0, 2)] {
        let (wi, bi) = params.conv_params(n, l).unwrap();
        let (w, b) = (store.get(wi).clone(), store.get(bi).clone());
        let b = normal_tensor(&mut rng(n as u64 * 3 + l as u64), b.shape(), 0.3);
        store.set(bi, b.data().to_vec()).unwrap();
        let x = if l == n + 2 { spaced_tensor(&mut rng(99), level_input(&layout, n, 0).shape()) } else { level_input(&layout, n, 5) };

        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let xi = g.constant(x.clone());
        let y = resize_to_level(&mut g, &bound, xi, n, l, &params).unwrap();
        let expected = if n > l {
            bilinear_oracle(&conv_oracle(&x, &w, &b, 1, 0), 1 << (n - l))
        } else if l == n + 1 {
            conv_oracle(&x, &w, &b, 2, 1)
        } else {
            conv_oracle(&maxpool_oracle(&x), &w, &b, 2, 1)
        };
        assert_eq!(g.shape(y), layout.level_shape(l, 2, 32), "{n}->{l}");
        assert!(g.value(y).max_abs_diff(&expected) <= 1e-9, "{n}->{l}");
    }
}

#[test]
fn quarter_branch_is_pool_then_half_branch() {
    let layout = PyramidLayout::default();
    let mut store = ParamStore::<f32>::new(3);
    let params = ResizeParams::new(&mut store, &layout, ResizeMode::Real, InterpMode::Bilinear).unwrap();
    let x = level_input(&layout, 0, 21).cast::<f32>();
    let (w, b) = params.conv_params(0, 2).unwrap();

    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let xi = g.constant(x);
    let direct = resize_to_level(&mut g, &bound, xi, 0, 2, &params).unwrap();
    let pooled = g.maxpool2(xi).unwrap();
    let composed = g.conv2d(pooled, bound.id(w), Some(bound.id(b)), 2, 1).unwrap();
    assert_eq!(g.value(direct).data(), g.value(composed).data());
}

#[test]
fn resize_rejects_wrong_channel_count() {
    let layout = PyramidLayout::default();
    let mut store = ParamStore::new(0);
    let params = resize_params(&layout, &mut store);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let x = g.constant(Tensor::<f64>::zeros(Shape::new(1, layout.channels[0] + 1, 8, 8)));
    assert!(matches!(resize_to_level(&mut g, &bound, x, 0, 1, &params), Err(Error::Dimension { axis: Axis::C, .. })));
}

//! Decomposition of the loss gradient at level-1 features into per-level
//! contributions, and the cross-level conflict metric built on it.
//!
//! With `x^1, x^2, x^3` treated as independent inputs, the gradient at a
//! level-1 position splits as
//!
//! ```text
//! dL/dx^1 = sum_l (dy^l/dx^1) * dL/dy^l  =  g_1 + g_2 + g_3
//! ```
//!
//! Each `g_l` comes from its own backward pass that seeds only `dL/dy^l`.
//! Under identity rescaling the path factor collapses to the fusion
//! coefficient, so `total == sum_l c_l * dL/dy^l` with `c_l = 1` for sum
//! fusion and `c_l = w^{1->l}` for adaptive fusion with detached weights.
//!
//! Conflict is `1 - sum_c |sum_l g_lc| / sum_c sum_l |g_lc|` (0 when the
//! contributions agree in sign, 1 when they cancel exactly). The metric is
//! defined by this crate, not taken from the literature.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::detection::loss::{detection_loss, LossConfig};
use crate::detection::targets::TargetMaps;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::{Detector, ForwardOptions};
use crate::pyramid::{ResizeMode, NUM_LEVELS};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    Sum,
    Concat,
    Asff,
    /// Adaptive fusion with the weight maps treated as constants.
    AsffDetached,
}

impl AnalysisMode {
    pub fn fusion(self) -> FusionMode {
        match self {
            AnalysisMode::Sum => FusionMode::Sum,
            AnalysisMode::Concat => FusionMode::Concat,
            AnalysisMode::Asff | AnalysisMode::AsffDetached => FusionMode::Asff,
        }
    }

    pub fn detach(self) -> bool {
        self == AnalysisMode::AsffDetached
    }

    /// The mode whose gradient is the one training actually follows.
    pub fn native(fusion: FusionMode) -> Self {
        match fusion {
            FusionMode::Sum => AnalysisMode::Sum,
            FusionMode::Concat => AnalysisMode::Concat,
            FusionMode::Asff => AnalysisMode::Asff,
        }
    }
}

/// Level-1 gradients for a whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<T> {
    pub mode: AnalysisMode,
    pub resize: ResizeMode,
    pub loss: T,
    /// Shape of `x^1`.
    pub feature_shape: Shape,
    /// `dL/dx^1` from one full backward pass.
    pub total: Vec<T>,
    /// `g_l` at `x^1` from the pass seeded with `dL/dy^l` only.
    pub contributions: [Vec<T>; NUM_LEVELS],
    /// `dL/dy^l`, shaped like `y^l`.
    pub upstream: [Tensor<T>; NUM_LEVELS],
    /// `w^{1->l}` as `(N, 1, H_l, W_l)`; adaptive fusion only.
    pub source_one_weights: Option<[Tensor<T>; NUM_LEVELS]>,
}

/// The decomposition at one level-1 position, each vector over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientDecomposition<T> {
    pub position: (usize, usize, usize),
    pub contributions: [Vec<T>; NUM_LEVELS],
    pub total: Vec<T>,
    /// `w^{1->l}` at the cell of level `l` covering this position.
    pub weights_at_position: Option<[T; NUM_LEVELS]>,
}

impl<T: Real> GradientDecomposition<T> {
    pub fn conflict(&self) -> T {
        conflict_metric(&[&self.contributions[0], &self.contributions[1], &self.contributions[2]])
    }
}

fn l2<T: Real>(v: &[T]) -> T {
    v.iter().map(|x| *x * *x).sum::<T>().sqrt()
}

/// `1 - sum_c |sum_l g_lc| / sum_c sum_l |g_lc|`, and 0 when every
/// contribution is zero.
pub fn conflict_metric<T: Real>(contributions: &[&[T]]) -> T {
    let channels = contributions.first().map_or(0, |g| g.len());
    let (mut net, mut gross) = (T::zero(), T::zero());
    for c in 0..channels {
        let mut s = T::zero();
        for g in contributions {
            s = s + g[c];
            gross = gross + g[c].abs();
        }
        net = net + s.abs();
    }
    if gross.is_zero() {
        return T::zero();
    }
    (T::one() - net / gross).max(T::zero()).min(T::one())
}

/// Runs the forward pass with `x^1, x^2, x^3` detached from the backbone,
/// one full backward and three seeded backwards.
pub fn decompose<T: Real>(
    model: &Detector<T>,
    image: &Tensor<T>,
    targets: &TargetMaps,
    loss_cfg: &LossConfig,
    mode: AnalysisMode,
) -> Result<Decomposition<T>> {
    if mode.fusion() != model.fusion_mode() {
        return Err(Error::Config(format!("{mode:?} analysis needs a {:?} model, got {:?}", mode.fusion(), model.fusion_mode())));
    }
    let features: [Tensor<T>; NUM_LEVELS] = {
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g);
        let x = g.constant(image.clone());
        let f = model.backbone(&mut g, &bound, x)?;
        f.map(|id| g.value(id).detached())
    };

    let mut g = Graph::new();
    let bound = model.params().bind(&mut g);
    let leaves = features.map(|f| g.leaf(f.with_grad()));
    let out = model.neck_and_heads(&mut g, &bound, leaves, ForwardOptions { detach_fusion_weights: mode.detach() })?;
    let loss = detection_loss(&mut g, &out.preds, targets, loss_cfg)?;
    g.backward(loss)?;

    let grad_of = |g: &Graph<T>, id| g.grad(id).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); g.shape(id).numel()]);
    let total = grad_of(&g, leaves[0]);
    let upstream: [Tensor<T>; NUM_LEVELS] =
        std::array::from_fn(|l| Tensor::from_vec(g.shape(out.fused[l]), grad_of(&g, out.fused[l])).expect("grad volume"));
    let mut contributions: [Vec<T>; NUM_LEVELS] = Default::default();
    for l in 0..NUM_LEVELS {
        g.backward_seeded(&[(out.fused[l], upstream[l].data().to_vec())])?;
        contributions[l] = grad_of(&g, leaves[0]);
    }
    let source_one_weights = out.fusion_weights.map(|fw| {
        fw.map(|w| {
            let v = g.value(w.weights);
            let s = v.shape();
            Tensor::from_fn(s.with_c(1), |n, _, i, j| v.at(n, 0, i, j))
        })
    });
    Ok(Decomposition {
        mode,
        resize: model.config().resize,
        loss: g.value(loss).item(),
        feature_shape: g.shape(leaves[0]),
        total,
        contributions,
        upstream,
        source_one_weights,
    })
}

/// Decomposition at a single level-1 position `(n, i, j)`.
pub fn decompose_gradient<T: Real>(
    model: &Detector<T>,
    image: &Tensor<T>,
    targets: &TargetMaps,
    loss_cfg: &LossConfig,
    position: (usize, usize, usize),
    mode: AnalysisMode,
) -> Result<GradientDecomposition<T>> {
    let layout = &model.config().layout;
    let s = image.shape();
    let bound = (s.n, s.h / layout.strides[0], s.w / layout.strides[0]);
    check_position(position, bound)?;
    decompose(model, image, targets, loss_cfg, mode)?.at(position)
}

fn check_position(p: (usize, usize, usize), bound: (usize, usize, usize)) -> Result<()> {
    if p.0 >= bound.0 || p.1 >= bound.1 || p.2 >= bound.2 {
        return Err(Error::Range { what: "level-1 position", index: p, bound });
    }
    Ok(())
}

impl<T: Real> Decomposition<T> {
    fn channel_vec(&self, v: &[T], (n, i, j): (usize, usize, usize)) -> Vec<T> {
        let s = self.feature_shape;
        (0..s.c).map(|c| v[s.index(n, c, i, j)]).collect()
    }

    /// `w^{1->l}` at the level-`l` cell covering level-1 position `(i, j)`.
    fn weights_at(&self, (n, i, j): (usize, usize, usize)) -> Option<[T; NUM_LEVELS]> {
        let fine = self.feature_shape;
        self.source_one_weights.as_ref().map(|ws| {
            std::array::from_fn(|l| {
                let s = ws[l].shape();
                ws[l].at(n, 0, i * s.h / fine.h, j * s.w / fine.w)
            })
        })
    }

    pub fn at(&self, position: (usize, usize, usize)) -> Result<GradientDecomposition<T>> {
        let s = self.feature_shape;
        check_position(position, (s.n, s.h, s.w))?;
        Ok(GradientDecomposition {
            position,
            contributions: std::array::from_fn(|l| self.channel_vec(&self.contributions[l], position)),
            total: self.channel_vec(&self.total, position),
            weights_at_position: self.weights_at(position),
        })
    }

    /// `sum_l c_l * dL/dy^l` on the level-1 grid: `c_l = 1` for sum fusion,
    /// `w^{1->l}` for adaptive fusion. Defined only under identity
    /// rescaling, where every `y^l` shares the shape of `x^1`.
    pub fn weighted_upstream(&self) -> Result<Vec<T>> {
        if self.resize != ResizeMode::Identity {
            return Err(Error::Config("the weighted upstream sum needs identity rescaling".into()));
        }
        if self.mode == AnalysisMode::Concat {
            return Err(Error::Config("concat fusion has no scalar path coefficient".into()));
        }
        let s = self.feature_shape;
        let mut out = vec![T::zero(); s.numel()];
        for l in 0..NUM_LEVELS {
            let up = self.upstream[l].data();
            for n in 0..s.n {
                for c in 0..s.c {
                    for i in 0..s.h {
                        for j in 0..s.w {
                            let coef = match &self.source_one_weights {
                                Some(ws) => ws[l].at(n, 0, i, j),
                                None => T::one(),
                            };
                            let k = s.index(n, c, i, j);
                            out[k] = out[k] + coef * up[k];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Conflict at every level-1 position, `(N, 1, H, W)`.
    pub fn conflict_map(&self) -> Tensor<T> {
        let s = self.feature_shape;
        Tensor::from_fn(s.with_c(1), |n, _, i, j| {
            let g: [Vec<T>; NUM_LEVELS] = std::array::from_fn(|l| self.channel_vec(&self.contributions[l], (n, i, j)));
            conflict_metric(&[&g[0], &g[1], &g[2]])
        })
    }

    /// CSV rows for batch element `n`, one per level-1 position.
    pub fn to_csv(&self, n: usize) -> Result<String> {
        let s = self.feature_shape;
        check_position((n, 0, 0), (s.n, s.h, s.w))?;
        let mut out = String::from("position_i,position_j,g1_norm,g2_norm,g3_norm,total_norm,conflict,w1,w2,w3\n");
        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        for i in 0..s.h {
            for j in 0..s.w {
                let d = self.at((n, i, j))?;
                let _ = write!(out, "{i},{j}");
                for g in &d.contributions {
                    let _ = write!(out, ",{}", f(l2(g)));
                }
                let _ = write!(out, ",{},{}", f(l2(&d.total)), f(d.conflict()));
                match d.weights_at_position {
                    Some(w) => {
                        for v in w {
                            let _ = write!(out, ",{}", f(v));
                        }
                    }
                    None => out.push_str(",,,"),
                }
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path, n: usize) -> Result<()> {
        fs::write(path, self.to_csv(n)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConflictReport {
    /// Mean conflict over level-1 positive cells; 0 if there are none.
    pub mean_conflict: f64,
    /// `(N, 1, H_1, W_1)`
    pub per_position_conflict: Tensor<f64>,
    pub positives_mask: Vec<bool>,
    pub positives: usize,
}

pub fn conflict_report<T: Real>(decomp: &Decomposition<T>, targets: &TargetMaps) -> Result<ConflictReport> {
    let lt = &targets.levels[0];
    let s = decomp.feature_shape;
    lt.shape.expect_eq(&s.with_c(1), "conflict_report")?;
    let map = decomp.conflict_map().cast::<f64>();
    let positives_mask: Vec<bool> = lt.objectness.iter().map(|o| *o > 0.5).collect();
    let positives = positives_mask.iter().filter(|p| **p).count();
    let sum: f64 = map.data().iter().zip(&positives_mask).filter(|(_, p)| **p).map(|(c, _)| *c).sum();
    let mean_conflict = if positives == 0 { 0.0 } else { sum / positives as f64 };
    Ok(ConflictReport { mean_conflict, per_position_conflict: map, positives_mask, positives })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Eq6Report {
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks `dL/dx^1 == sum_l w^{1->l} * dL/dy^l` at every level-1 position.
/// Requires an adaptive-fusion model with identity rescaling; the weights
/// are detached for the check.
pub fn verify_eq6<T: Real>(model: &Detector<T>, image: &Tensor<T>, targets: &TargetMaps, loss_cfg: &LossConfig, tol: f64) -> Result<Eq6Report> {
    if model.fusion_mode() != FusionMode::Asff || model.config().resize != ResizeMode::Identity {
        return Err(Error::Config(format!(
            "the weighted-gradient identity is only checked for asff fusion with identity rescaling (got {:?} fusion, {:?} rescaling)",
            model.fusion_mode(),
            model.config().resize
        )));
    }
    let d = decompose(model, image, targets, loss_cfg, AnalysisMode::AsffDetached)?;
    let rhs = d.weighted_upstream()?;
    let max_abs_diff = d.total.iter().zip(&rhs).map(|(a, b)| (*a - *b).abs().to_f64().unwrap()).fold(0.0, f64::max);
    Ok(Eq6Report { max_abs_diff, tolerance: tol, pass: max_abs_diff <= tol })
}

/// How far the real gradient strays from the weighted upstream sum.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualReport {
    /// Max abs of `total(asff) - total(asff_detached)`: gradient that
    /// reaches `x^1` through the lambda convs.
    pub lambda_path_max: f64,
    pub lambda_path_norm: f64,
    /// Max abs of `total(asff_detached) - weighted upstream sum`; only under
    /// identity rescaling, where the right-hand side is defined.
    pub resize_path_max: Option<f64>,
    /// `|g_l| / |w^{1->l} * dL/dy^l|` per level with detached weights: how
    /// much each rescaling Jacobian scales the upstream gradient.
    pub jacobian_gain: [f64; NUM_LEVELS],
}

pub fn residuals<T: Real>(model: &Detector<T>, image: &Tensor<T>, targets: &TargetMaps, loss_cfg: &LossConfig) -> Result<ResidualReport> {
    let native = decompose(model, image, targets, loss_cfg, AnalysisMode::Asff)?;
    let detached = decompose(model, image, targets, loss_cfg, AnalysisMode::AsffDetached)?;
    let f = |v: T| v.to_f64().unwrap();
    let lambda: Vec<f64> = native.total.iter().zip(&detached.total).map(|(a, b)| f(*a - *b)).collect();
    let resize_path_max = match detached.weighted_upstream() {
        Ok(rhs) => Some(detached.total.iter().zip(&rhs).map(|(a, b)| f((*a - *b).abs())).fold(0.0, f64::max)),
        Err(_) => None,
    };
    let ws = detached.source_one_weights.as_ref().expect("asff decomposition carries weights");
    let jacobian_gain = std::array::from_fn(|l| {
        let up = &detached.upstream[l];
        let s = up.shape();
        let mut sq = 0.0;
        for n in 0..s.n {
            for c in 0..s.c {
                for i in 0..s.h {
                    for j in 0..s.w {
                        let v = f(ws[l].at(n, 0, i, j) * up.at(n, c, i, j));
                        sq += v * v;
                    }
                }
            }
        }
        let num = f(l2(&detached.contributions[l]));
        if sq == 0.0 {
            0.0
        } else {
            num / sq.sqrt()
        }
    });
    Ok(ResidualReport {
        lambda_path_max: lambda.iter().map(|v| v.abs()).fold(0.0, f64::max),
        lambda_path_norm: lambda.iter().map(|v| v * v).sum::<f64>().sqrt(),
        resize_path_max,
        jacobian_gain,
    })
}

//! Three-level feature pyramids and the rules that rescale one level's
//! features to another level's shape.
//!
//! **Level indexing.** Levels are indexed `0, 1, 2` in code and named
//! `1, 2, 3` in files and parameter names. Index 0 is the *highest*
//! resolution (smallest stride); every step up halves the resolution.
//!
//! Rescaling from source level `n` to target level `l`:
//!
//! | relation              | operation                                   |
//! |-----------------------|---------------------------------------------|
//! | `n == l`              | the input tensor itself                     |
//! | `n` coarser by 2 or 4 | 1×1 conv to `C_l`, then one ×2 / ×4 upsample |
//! | `n` finer by 2        | 3×3 conv, stride 2                          |
//! | `n` finer by 4        | 2×2 max-pool, then 3×3 conv, stride 2       |
//!
//! The ×4 upsample is a single ×4 interpolation, not two chained ×2 steps.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, InterpMode, TensorId};
use crate::error::{Axis, Error, Result};
use crate::params::{Bound, Init, ParamIdx, ParamStore};
use crate::tensor::{Real, Shape};

pub const NUM_LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    #[default]
    Real,
    /// Test configuration: all levels share resolution and channel count and
    /// rescaling is the identity, so `d x^{n->l} / d x^n = 1` holds exactly.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidLayout {
    pub channels: [usize; NUM_LEVELS],
    /// Input pixels per feature cell at each level.
    pub strides: [usize; NUM_LEVELS],
}

impl Default for PyramidLayout {
    fn default() -> Self {
        PyramidLayout { channels: [32, 16, 8], strides: [4, 8, 16] }
    }
}

impl PyramidLayout {
    pub fn validate(&self, mode: ResizeMode) -> Result<()> {
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("pyramid channels and strides must be positive".into()));
        }
        match mode {
            ResizeMode::Real => {
                for l in 1..NUM_LEVELS {
                    if self.strides[l] != 2 * self.strides[l - 1] {
                        return Err(Error::Config(format!(
                            "pyramid strides must double between adjacent levels, got {:?}",
                            self.strides
                        )));
                    }
                }
            }
            ResizeMode::Identity => {
                if self.channels.iter().any(|c| *c != self.channels[0]) || self.strides.iter().any(|s| *s != self.strides[0]) {
                    return Err(Error::Config(
                        "identity resizing requires equal channels and strides at every level".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn level_shape(&self, level: usize, batch: usize, image_size: usize) -> Shape {
        let s = image_size / self.strides[level];
        Shape::new(batch, self.channels[level], s, s)
    }

    /// Image sizes must divide evenly by the coarsest stride.
    pub fn check_image_size(&self, image_size: usize) -> Result<()> {
        let coarsest = *self.strides.iter().max().unwrap();
        if image_size == 0 || !image_size.is_multiple_of(coarsest) {
            return Err(Error::Config(format!("image size {image_size} is not a multiple of the coarsest stride {coarsest}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Branch {
    Identity,
    Up { scale: usize, weight: ParamIdx, bias: ParamIdx },
    Down { pool: bool, weight: ParamIdx, bias: ParamIdx },
}

/// Parameters of every `n -> l` rescaling branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizeParams {
    mode: ResizeMode,
    interp: InterpMode,
    channels: [usize; NUM_LEVELS],
    /// `branches[l][n]` maps level `n` onto level `l`.
    branches: [[Branch; NUM_LEVELS]; NUM_LEVELS],
}

impl ResizeParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, layout: &PyramidLayout, mode: ResizeMode, interp: InterpMode) -> Result<Self> {
        layout.validate(mode)?;
        let ch = layout.channels;
        let branches = std::array::from_fn(|l| {
            std::array::from_fn(|n| {
                if n == l || mode == ResizeMode::Identity {
                    return Branch::Identity;
                }
                let prefix = format!("resize.{}to{}", n + 1, l + 1);
                if n > l {
                    let weight = store.add(format!("{prefix}.weight"), Shape::new(ch[l], ch[n], 1, 1), Init::Msra);
                    let bias = store.add(format!("{prefix}.bias"), Shape::new(1, ch[l], 1, 1), Init::Zeros);
                    Branch::Up { scale: 1 << (n - l), weight, bias }
                } else {
                    let weight = store.add(format!("{prefix}.weight"), Shape::new(ch[l], ch[n], 3, 3), Init::Msra);
                    let bias = store.add(format!("{prefix}.bias"), Shape::new(1, ch[l], 1, 1), Init::Zeros);
                    Branch::Down { pool: l - n == 2, weight, bias }
                }
            })
        });
        Ok(ResizeParams { mode, interp, channels: ch, branches })
    }

    pub fn mode(&self) -> ResizeMode {
        self.mode
    }

    pub fn interp(&self) -> InterpMode {
        self.interp
    }

    /// `(weight, bias)` of the conv in the `n -> l` branch, if it has one.
    pub fn conv_params(&self, n: usize, l: usize) -> Option<(ParamIdx, ParamIdx)> {
        match &self.branches[l][n] {
            Branch::Identity => None,
            Branch::Up { weight, bias, .. } | Branch::Down { weight, bias, .. } => Some((*weight, *bias)),
        }
    }
}

/// Rescales `x_n` (features of level `n`) to the shape of level `l`.
pub fn resize_to_level<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    x_n: TensorId,
    n: usize,
    l: usize,
    params: &ResizeParams,
) -> Result<TensorId> {
    if n >= NUM_LEVELS || l >= NUM_LEVELS {
        return Err(Error::invalid(format!("level pair {n}->{l} outside 0..{NUM_LEVELS}")));
    }
    g.shape(x_n).expect_axis(Axis::C, params.channels[n], "resize_to_level")?;
    match &params.branches[l][n] {
        Branch::Identity => Ok(x_n),
        Branch::Up { scale, weight, bias } => {
            let compressed = g.conv2d(x_n, bound.id(*weight), Some(bound.id(*bias)), 1, 0)?;
            g.upsample(compressed, *scale, params.interp)
        }
        Branch::Down { pool, weight, bias } => {
            let shape = g.shape(x_n);
            let ratio = if *pool { 4 } else { 2 };
            if !shape.h.is_multiple_of(ratio) {
                return Err(Error::Dimension { op: "resize_to_level", axis: Axis::H, expected: shape.h.next_multiple_of(ratio), actual: shape.h });
            }
            if !shape.w.is_multiple_of(ratio) {
                return Err(Error::Dimension { op: "resize_to_level", axis: Axis::W, expected: shape.w.next_multiple_of(ratio), actual: shape.w });
            }
            let src = if *pool { g.maxpool2(x_n)? } else { x_n };
            g.conv2d(src, bound.id(*weight), Some(bound.id(*bias)), 2, 1)
        }
    }
}

/// Per-level features `x^l` plus, once computed, every rescaled `x^{n->l}`.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub levels: [TensorId; NUM_LEVELS],
    /// `resized[l][n]` is `x^{n->l}`; `resized[l][l]` is `levels[l]` itself.
    pub resized: Option<[[TensorId; NUM_LEVELS]; NUM_LEVELS]>,
}

impl PyramidFeatures {
    pub fn new(levels: [TensorId; NUM_LEVELS]) -> Self {
        PyramidFeatures { levels, resized: None }
    }

    /// Checks the 2× spatial ratio between adjacent levels (or equality in
    /// identity mode).
    pub fn validate<T: Real>(&self, g: &Graph<T>, mode: ResizeMode) -> Result<()> {
        for l in 1..NUM_LEVELS {
            let (fine, coarse) = (g.shape(self.levels[l - 1]), g.shape(self.levels[l]));
            let factor = if mode == ResizeMode::Identity { 1 } else { 2 };
            coarse.expect_axis(Axis::N, fine.n, "pyramid")?;
            fine.expect_axis(Axis::H, coarse.h * factor, "pyramid")?;
            fine.expect_axis(Axis::W, coarse.w * factor, "pyramid")?;
        }
        Ok(())
    }

    pub fn resize_all<T: Real>(&mut self, g: &mut Graph<T>, bound: &Bound, params: &ResizeParams) -> Result<[[TensorId; NUM_LEVELS]; NUM_LEVELS]> {
        self.validate(g, params.mode)?;
        let mut out = [[self.levels[0]; NUM_LEVELS]; NUM_LEVELS];
        for (l, row) in out.iter_mut().enumerate() {
            let target = g.shape(self.levels[l]);
            for (n, slot) in row.iter_mut().enumerate() {
                *slot = resize_to_level(g, bound, self.levels[n], n, l, params)?;
                target.expect_eq(&g.shape(*slot), "resize_to_level output")?;
            }
        }
        self.resized = Some(out);
        Ok(out)
    }
}

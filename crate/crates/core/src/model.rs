//! The desk-scale detector: a strided conv backbone producing three pyramid
//! levels, a fusion neck, and one 1×1 prediction head per level.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, InterpMode, TensorId};
use crate::detection::loss::PRED_CHANNELS;
use crate::error::{Axis, Error, Result};
use crate::fusion::{compute_fusion_weights, fuse, fuse_baseline, ConcatParams, FusionMode, FusionWeights, LambdaParams};
use crate::params::{Bound, Init, ParamIdx, ParamStore};
use crate::pyramid::{PyramidFeatures, PyramidLayout, ResizeMode, ResizeParams, NUM_LEVELS};
use crate::tensor::{Real, Shape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layout: PyramidLayout,
    pub fusion: FusionMode,
    pub resize: ResizeMode,
    pub interp: InterpMode,
    /// Width of the stem convs before the first pyramid level.
    pub stem_channels: usize,
    pub leaky_slope: f64,
    /// Initial objectness probability encoded in the head bias.
    pub objectness_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layout: PyramidLayout::default(),
            fusion: FusionMode::Asff,
            resize: ResizeMode::Real,
            interp: InterpMode::Bilinear,
            stem_channels: 8,
            leaky_slope: 0.1,
            objectness_prior: 0.01,
        }
    }
}

impl ModelConfig {
    /// Equal channels and strides at every level, identity rescaling.
    pub fn identity_test(channels: usize, stride: usize, fusion: FusionMode) -> Self {
        ModelConfig {
            layout: PyramidLayout { channels: [channels; NUM_LEVELS], strides: [stride; NUM_LEVELS] },
            fusion,
            resize: ResizeMode::Identity,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate(self.resize)?;
        let s0 = self.layout.strides[0];
        if s0 < 2 || !s0.is_power_of_two() {
            return Err(Error::Config(format!("the finest stride must be a power of two >= 2, got {s0}")));
        }
        if self.stem_channels == 0 {
            return Err(Error::Config("stem_channels must be positive".into()));
        }
        if !(self.objectness_prior > 0.0 && self.objectness_prior < 1.0) {
            return Err(Error::Config(format!("objectness_prior must lie in (0, 1), got {}", self.objectness_prior)));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope must lie in [0, 1), got {}", self.leaky_slope)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvLayer {
    weight: ParamIdx,
    bias: ParamIdx,
    stride: usize,
}

impl ConvLayer {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvLayer {
            weight: store.add(format!("{name}.weight"), Shape::new(cout, cin, k, k), Init::Msra),
            bias: store.add(format!("{name}.bias"), Shape::new(1, cout, 1, 1), Init::Zeros),
            stride,
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, x: TensorId) -> Result<TensorId> {
        let w = bound.id(self.weight);
        let pad = g.shape(w).h / 2;
        g.conv2d(x, w, Some(bound.id(self.bias)), self.stride, pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Head {
    hidden: ConvLayer,
    out: ConvLayer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Feed the fusion weights into the fused sum as constants.
    pub detach_fusion_weights: bool,
}

#[derive(Clone, Debug)]
pub struct Outputs {
    pub features: [TensorId; NUM_LEVELS],
    /// `resized[l][n]` is `x^{n->l}`.
    pub resized: [[TensorId; NUM_LEVELS]; NUM_LEVELS],
    pub fusion_weights: Option<[FusionWeights; NUM_LEVELS]>,
    /// `y^l`
    pub fused: [TensorId; NUM_LEVELS],
    /// `(N, 5, H_l, W_l)` raw prediction maps.
    pub preds: [TensorId; NUM_LEVELS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    stem: Vec<ConvLayer>,
    level_convs: Vec<ConvLayer>,
    resize: ResizeParams,
    lambda: Option<LambdaParams>,
    concat: Option<ConcatParams>,
    heads: [Head; NUM_LEVELS],
}

impl<T: Real> Detector<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let layout = &config.layout;
        let ch = layout.channels;

        let n_stem = layout.strides[0].trailing_zeros() as usize;
        let mut stem = Vec::with_capacity(n_stem);
        let mut cin = 1;
        for k in 0..n_stem {
            let cout = if k + 1 == n_stem { ch[0] } else { config.stem_channels };
            stem.push(ConvLayer::new(&mut store, &format!("backbone.stem{}", k + 1), cin, cout, 3, 2));
            cin = cout;
        }
        let level_convs = (1..NUM_LEVELS)
            .map(|l| {
                let stride = layout.strides[l] / layout.strides[l - 1];
                ConvLayer::new(&mut store, &format!("backbone.level{}", l + 1), ch[l - 1], ch[l], 3, stride)
            })
            .collect();

        let resize = ResizeParams::new(&mut store, layout, config.resize, config.interp)?;
        let lambda = (config.fusion == FusionMode::Asff).then(|| LambdaParams::new(&mut store, ch));
        let concat = (config.fusion == FusionMode::Concat).then(|| ConcatParams::new(&mut store, ch));

        let prior_logit = -((1.0 - config.objectness_prior) / config.objectness_prior).ln();
        let heads = std::array::from_fn(|l| {
            let name = format!("head.{}", l + 1);
            let hidden = ConvLayer::new(&mut store, &format!("{name}.hidden"), ch[l], ch[l], 1, 1);
            let out = ConvLayer {
                weight: store.add(format!("{name}.out.weight"), Shape::new(PRED_CHANNELS, ch[l], 1, 1), Init::Normal(0.01)),
                bias: store.add(format!("{name}.out.bias"), Shape::new(1, PRED_CHANNELS, 1, 1), Init::Zeros),
                stride: 1,
            };
            store.get_mut(out.bias).data_mut()[0] = T::lit(prior_logit);
            Head { hidden, out }
        });

        Ok(Detector { config: config.clone(), params: store, stem, level_convs, resize, lambda, concat, heads })
    }

    /// Builds the architecture for `config` and takes its parameter values
    /// from `params`, which must hold exactly the same names and shapes.
    pub fn from_params(config: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Detector::<T>::new(config, params.seed())?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", model.params.len(), params.len())));
        }
        for idx in model.params.indices().collect::<Vec<_>>() {
            let name = model.params.name(idx).to_owned();
            let src = params.find(&name).ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            let tensor = params.get(src);
            if tensor.shape() != model.params.get(idx).shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    tensor.shape().dims(),
                    model.params.get(idx).shape().dims()
                )));
            }
            model.params.set(idx, tensor.data().to_vec())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fusion_mode(&self) -> FusionMode {
        self.config.fusion
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn lambda_params(&self) -> Option<&LambdaParams> {
        self.lambda.as_ref()
    }

    pub fn resize_params(&self) -> &ResizeParams {
        &self.resize
    }

    /// Fusion parameters: the lambda convs in asff mode, the concat convs in
    /// concat mode, none for sum.
    pub fn fusion_param_indices(&self) -> Vec<ParamIdx> {
        let mut out: Vec<ParamIdx> = self.lambda.iter().flat_map(|p| p.all().collect::<Vec<_>>()).collect();
        if let Some(c) = &self.concat {
            for l in 0..NUM_LEVELS {
                let (w, b) = c.conv(l);
                out.extend([w, b]);
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Detector<U> {
        Detector {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            level_convs: self.level_convs.clone(),
            resize: self.resize.clone(),
            lambda: self.lambda.clone(),
            concat: self.concat.clone(),
            heads: self.heads,
        }
    }

    /// Image `(N, 1, S, S)` to pyramid features `x^1, x^2, x^3`.
    pub fn backbone(&self, g: &mut Graph<T>, bound: &Bound, image: TensorId) -> Result<[TensorId; NUM_LEVELS]> {
        let s = g.shape(image);
        s.expect_axis(Axis::C, 1, "backbone")?;
        s.expect_axis(Axis::W, s.h, "backbone")?;
        self.config.layout.check_image_size(s.h)?;
        let slope = T::lit(self.config.leaky_slope);
        let mut x = image;
        for layer in &self.stem {
            let y = layer.apply(g, bound, x)?;
            x = g.leaky_relu(y, slope)?;
        }
        let mut levels = [x; NUM_LEVELS];
        for (l, layer) in self.level_convs.iter().enumerate() {
            let y = layer.apply(g, bound, levels[l])?;
            levels[l + 1] = g.leaky_relu(y, slope)?;
        }
        Ok(levels)
    }

    /// Rescaling, fusion and prediction heads on given pyramid features.
    pub fn neck_and_heads(&self, g: &mut Graph<T>, bound: &Bound, features: [TensorId; NUM_LEVELS], opts: ForwardOptions) -> Result<Outputs> {
        let mut pyramid = PyramidFeatures::new(features);
        let resized = pyramid.resize_all(g, bound, &self.resize)?;
        let mut fused = [features[0]; NUM_LEVELS];
        let mut weights = Vec::new();
        for l in 0..NUM_LEVELS {
            fused[l] = match (&self.lambda, self.config.fusion) {
                (Some(lambda), FusionMode::Asff) => {
                    let w = compute_fusion_weights(g, bound, &resized[l], lambda, l)?;
                    weights.push(w);
                    fuse(g, &resized[l], &w, opts.detach_fusion_weights)?
                }
                (_, mode) => fuse_baseline(g, bound, &resized[l], mode, self.concat.as_ref(), l)?,
            };
        }
        let slope = T::lit(self.config.leaky_slope);
        let mut preds = [features[0]; NUM_LEVELS];
        for l in 0..NUM_LEVELS {
            let h = self.heads[l].hidden.apply(g, bound, fused[l])?;
            let h = g.leaky_relu(h, slope)?;
            preds[l] = self.heads[l].out.apply(g, bound, h)?;
        }
        let fusion_weights = (weights.len() == NUM_LEVELS).then(|| [weights[0], weights[1], weights[2]]);
        Ok(Outputs { features, resized, fusion_weights, fused, preds })
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, image: TensorId, opts: ForwardOptions) -> Result<Outputs> {
        let features = self.backbone(g, bound, image)?;
        self.neck_and_heads(g, bound, features, opts)
    }
}

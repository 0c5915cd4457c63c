//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an arena of tensors plus an ordered list of operation
//! records. Operations are appended as they execute, so the record list is
//! already in topological order; backward walks it once in reverse.

use std::fmt;

use crate::error::{Axis, Error, Result};
use crate::ops::{conv, elementwise as ew, interp, pool, softmax};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InterpMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Backward rule for operations defined outside this module (the detection loss).
pub trait CustomBackward<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns the gradient contribution for every input, `None` where the
    /// input has no gradient path.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, d_out: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Conv2d { geom: conv::ConvGeometry, has_bias: bool },
    Upsample { scale: usize, mode: InterpMode },
    MaxPool2 { argmax: Vec<usize> },
    SoftmaxSources,
    Add,
    Mul,
    Scale(T),
    WeightedSum,
    Concat,
    LeakyRelu(T),
    Sum,
    Custom(Box<dyn CustomBackward<T>>),
}

impl<T: Real> fmt::Debug for Op<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Conv2d { geom, .. } => write!(f, "conv2d(k={}, s={})", geom.kernel, geom.stride),
            Op::Upsample { scale, mode } => write!(f, "upsample({mode:?}, x{scale})"),
            Op::MaxPool2 { .. } => f.write_str("maxpool2"),
            Op::SoftmaxSources => f.write_str("softmax_sources"),
            Op::Add => f.write_str("add"),
            Op::Mul => f.write_str("mul"),
            Op::Scale(s) => write!(f, "scale({s})"),
            Op::WeightedSum => f.write_str("weighted_sum"),
            Op::Concat => f.write_str("concat"),
            Op::LeakyRelu(s) => write!(f, "leaky_relu({s})"),
            Op::Sum => f.write_str("sum"),
            Op::Custom(c) => f.write_str(c.name()),
        }
    }
}

#[derive(Debug)]
struct Node<T: Real> {
    op: Op<T>,
    inputs: Vec<TensorId>,
    output: TensorId,
}

pub struct Graph<T: Real> {
    tensors: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { tensors: Vec::new(), nodes: Vec::new() }
    }

    /// Inserts a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> TensorId {
        self.tensors.push(tensor);
        TensorId(self.tensors.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> TensorId {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> TensorId {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Copies `id`'s values into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let t = self.tensors[id.0].detached();
        self.leaf(t)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.tensors[id.0].shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<TensorId>, mut out: Tensor<T>) -> TensorId {
        out.requires_grad = inputs.iter().any(|i| self.tensors[i.0].requires_grad);
        let record = out.requires_grad;
        let output = self.leaf(out);
        if record {
            self.nodes.push(Node { op, inputs, output });
        }
        output
    }

    fn same_shape(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<Shape> {
        let sa = self.shape(a);
        sa.expect_eq(&self.shape(b), op)?;
        Ok(sa)
    }

    pub fn conv2d(&mut self, x: TensorId, weight: TensorId, bias: Option<TensorId>, stride: usize, pad: usize) -> Result<TensorId> {
        let geom = conv::ConvGeometry::new(self.shape(x), self.shape(weight), stride, pad)?;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.numel() != geom.out_channels {
                return Err(Error::Dimension { op: "conv2d bias", axis: Axis::C, expected: geom.out_channels, actual: bs.numel() });
            }
        }
        let mut out = Tensor::zeros(geom.output());
        conv::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d { geom, has_bias: bias.is_some() }, inputs, out))
    }

    pub fn upsample(&mut self, x: TensorId, scale: usize, mode: InterpMode) -> Result<TensorId> {
        if scale < 2 {
            return Err(Error::invalid(format!("upsample: scale must be >= 2, got {scale}")));
        }
        let shape = self.shape(x);
        let mut out = Tensor::zeros(interp::upsample_shape(shape, scale));
        match mode {
            InterpMode::Bilinear => interp::bilinear_forward(shape, scale, self.value(x).data(), out.data_mut()),
            InterpMode::Nearest => interp::nearest_forward(shape, scale, self.value(x).data(), out.data_mut()),
        }
        Ok(self.push(Op::Upsample { scale, mode }, vec![x], out))
    }

    pub fn interpolate_bilinear(&mut self, x: TensorId, scale: usize) -> Result<TensorId> {
        self.upsample(x, scale, InterpMode::Bilinear)
    }

    pub fn maxpool2(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x);
        if !shape.h.is_multiple_of(2) || !shape.w.is_multiple_of(2) {
            return Err(Error::invalid(format!("maxpool2: spatial size {}x{} is not even", shape.h, shape.w)));
        }
        let os = pool::maxpool2_shape(shape);
        let mut out = Tensor::zeros(os);
        let mut argmax = vec![0; os.numel()];
        pool::maxpool2_forward(shape, self.value(x).data(), out.data_mut(), &mut argmax);
        Ok(self.push(Op::MaxPool2 { argmax }, vec![x], out))
    }

    pub fn softmax_over_sources(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x);
        if shape.c < 2 {
            return Err(Error::invalid(format!("softmax_over_sources: need at least 2 sources, got {}", shape.c)));
        }
        let mut out = Tensor::zeros(shape);
        softmax::softmax_sources_forward(shape, self.value(x).data(), out.data_mut());
        Ok(self.push(Op::SoftmaxSources, vec![x], out))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        Ok(self.push(Op::Add, vec![a, b], Tensor::from_vec(shape, data)?))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        Ok(self.push(Op::Mul, vec![a, b], Tensor::from_vec(shape, data)?))
    }

    pub fn scale(&mut self, a: TensorId, s: T) -> Result<TensorId> {
        let shape = self.shape(a);
        let data = self.value(a).data().iter().map(|x| *x * s).collect();
        Ok(self.push(Op::Scale(s), vec![a], Tensor::from_vec(shape, data)?))
    }

    /// `sum_k weights[:, k] * sources[k]`, with the 1-channel weight maps
    /// broadcast across every feature channel.
    pub fn weighted_sum(&mut self, sources: &[TensorId], weights: TensorId) -> Result<TensorId> {
        if sources.is_empty() {
            return Err(Error::invalid("weighted_sum: no sources"));
        }
        let shape = self.shape(sources[0]);
        for s in &sources[1..] {
            shape.expect_eq(&self.shape(*s), "weighted_sum")?;
        }
        let ws = self.shape(weights);
        ws.expect_eq(&Shape::new(shape.n, sources.len(), shape.h, shape.w), "weighted_sum weights")?;
        let mut out = Tensor::zeros(shape);
        {
            let srcs: Vec<&[T]> = sources.iter().map(|s| self.value(*s).data()).collect();
            ew::weighted_sum_forward(shape, &srcs, self.value(weights).data(), out.data_mut());
        }
        let mut inputs = sources.to_vec();
        inputs.push(weights);
        Ok(self.push(Op::WeightedSum, inputs, out))
    }

    pub fn concat_channels(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat: no inputs"));
        }
        let first = self.shape(parts[0]);
        let mut c = 0;
        for p in parts {
            let s = self.shape(*p);
            s.expect_axis(Axis::N, first.n, "concat")?;
            s.expect_axis(Axis::H, first.h, "concat")?;
            s.expect_axis(Axis::W, first.w, "concat")?;
            c += s.c;
        }
        let mut out = Tensor::zeros(first.with_c(c));
        {
            let views: Vec<(Shape, &[T])> = parts.iter().map(|p| (self.shape(*p), self.value(*p).data())).collect();
            ew::concat_channels_forward(&views, out.data_mut());
        }
        Ok(self.push(Op::Concat, parts.to_vec(), out))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: T) -> Result<TensorId> {
        let shape = self.shape(x);
        let data = self.value(x).data().iter().map(|v| ew::leaky_relu(*v, slope)).collect();
        Ok(self.push(Op::LeakyRelu(slope), vec![x], Tensor::from_vec(shape, data)?))
    }

    /// Sum of all elements, as a `(1,1,1,1)` tensor.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let total = self.value(x).data().iter().copied().sum();
        Ok(self.push(Op::Sum, vec![x], Tensor::scalar(total)))
    }

    /// Records an externally computed output together with its backward rule.
    pub fn custom(&mut self, inputs: Vec<TensorId>, output: Tensor<T>, rule: Box<dyn CustomBackward<T>>) -> TensorId {
        self.push(Op::Custom(rule), inputs, output)
    }

    /// Clears stored gradients and gives every `requires_grad` tensor a zero buffer.
    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = t.requires_grad.then(|| vec![T::zero(); t.shape().numel()]);
        }
    }

    /// Standard backward from a scalar loss with seed 1.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let shape = self.shape(loss);
        if shape != Shape::SCALAR {
            return Err(Error::invalid(format!("backward: loss must be a scalar (1,1,1,1), got {shape}")));
        }
        self.backward_seeded(&[(loss, vec![T::one()])])
    }

    /// Backward pass that starts from arbitrary upstream gradients. Every
    /// gradient buffer is reset first, so only paths from the seeded tensors
    /// contribute.
    pub fn backward_seeded(&mut self, seeds: &[(TensorId, Vec<T>)]) -> Result<()> {
        self.zero_grads();
        for (id, seed) in seeds {
            let t = &mut self.tensors[id.0];
            if seed.len() != t.shape().numel() {
                return Err(Error::Length { expected: t.shape().numel(), actual: seed.len() });
            }
            if let Some(g) = t.grad.as_mut() {
                for (a, b) in g.iter_mut().zip(seed) {
                    *a = *a + *b;
                }
            }
        }
        for k in (0..self.nodes.len()).rev() {
            let out_id = self.nodes[k].output;
            let d_out = match self.tensors[out_id.0].grad.take() {
                Some(g) => g,
                None => continue,
            };
            if d_out.iter().all(|v| v.is_zero()) {
                self.tensors[out_id.0].grad = Some(d_out);
                continue;
            }
            let contributions = self.node_backward(k, &d_out);
            self.tensors[out_id.0].grad = Some(d_out);
            let inputs = self.nodes[k].inputs.clone();
            for (id, contrib) in inputs.into_iter().zip(contributions) {
                if let (Some(c), Some(g)) = (contrib, self.tensors[id.0].grad.as_mut()) {
                    for (a, b) in g.iter_mut().zip(&c) {
                        *a = *a + *b;
                    }
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, k: usize, d_out: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[k];
        let needs = |i: usize| self.tensors[node.inputs[i].0].requires_grad;
        let zeros = |i: usize| vec![T::zero(); self.shape(node.inputs[i]).numel()];
        let val = |i: usize| self.value(node.inputs[i]);
        match &node.op {
            Op::Conv2d { geom, has_bias } => {
                let mut dx = needs(0).then(|| zeros(0));
                let mut dw = needs(1).then(|| zeros(1));
                let mut db = (*has_bias && needs(2)).then(|| zeros(2));
                conv::conv2d_backward(
                    geom,
                    val(0).data(),
                    val(1).data(),
                    d_out,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                let mut v = vec![dx, dw];
                if *has_bias {
                    v.push(db);
                }
                v
            }
            Op::Upsample { scale, mode } => {
                let mut dx = zeros(0);
                match mode {
                    InterpMode::Bilinear => interp::bilinear_backward(val(0).shape(), *scale, d_out, &mut dx),
                    InterpMode::Nearest => interp::nearest_backward(val(0).shape(), *scale, d_out, &mut dx),
                }
                vec![Some(dx)]
            }
            Op::MaxPool2 { argmax } => {
                let mut dx = zeros(0);
                pool::maxpool2_backward(argmax, d_out, &mut dx);
                vec![Some(dx)]
            }
            Op::SoftmaxSources => {
                let mut dx = zeros(0);
                let y = self.value(node.output);
                softmax::softmax_sources_backward(y.shape(), y.data(), d_out, &mut dx);
                vec![Some(dx)]
            }
            Op::Add => vec![needs(0).then(|| d_out.to_vec()), needs(1).then(|| d_out.to_vec())],
            Op::Mul => {
                let (a, b) = (val(0).data(), val(1).data());
                vec![
                    needs(0).then(|| d_out.iter().zip(b).map(|(g, y)| *g * *y).collect()),
                    needs(1).then(|| d_out.iter().zip(a).map(|(g, x)| *g * *x).collect()),
                ]
            }
            Op::Scale(s) => vec![Some(d_out.iter().map(|g| *g * *s).collect())],
            Op::WeightedSum => {
                let s = node.inputs.len() - 1;
                let shape = val(0).shape();
                let weights = val(s).data();
                let mut out: Vec<Option<Vec<T>>> = (0..s)
                    .map(|k| {
                        needs(k).then(|| {
                            let mut d = zeros(k);
                            ew::weighted_sum_backward_source(shape, k, s, weights, d_out, &mut d);
                            d
                        })
                    })
                    .collect();
                out.push(needs(s).then(|| {
                    let srcs: Vec<&[T]> = (0..s).map(|k| val(k).data()).collect();
                    let mut d = zeros(s);
                    ew::weighted_sum_backward_weights(shape, &srcs, d_out, &mut d);
                    d
                }));
                out
            }
            Op::Concat => {
                let shapes: Vec<Shape> = node.inputs.iter().map(|i| self.shape(*i)).collect();
                (0..shapes.len())
                    .map(|k| {
                        needs(k).then(|| {
                            let mut d = zeros(k);
                            ew::concat_channels_backward(&shapes, k, d_out, &mut d);
                            d
                        })
                    })
                    .collect()
            }
            Op::LeakyRelu(slope) => {
                vec![Some(val(0).data().iter().zip(d_out).map(|(x, g)| *g * ew::leaky_relu_grad(*x, *slope)).collect())]
            }
            Op::Sum => vec![Some(vec![d_out[0]; val(0).shape().numel()])],
            Op::Custom(rule) => {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|i| self.value(*i)).collect();
                let mut v = rule.backward(&inputs, self.value(node.output), d_out);
                for (k, g) in v.iter_mut().enumerate() {
                    if !needs(k) {
                        *g = None;
                    }
                }
                v
            }
        }
    }
}

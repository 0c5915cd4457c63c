//! Named parameter storage shared by the model, optimizer and checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, TensorId};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamIdx(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Zero-mean Gaussian with the given std.
    Normal(f64),
    /// Zero-mean Gaussian with std `sqrt(2 / fan_in)`, fan_in = Cin * k * k.
    Msra,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    seed: u64,
}

/// FNV-1a; gives every parameter name its own RNG stream so that parameters
/// shared by differently configured models start from identical values.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), seed }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Shape, init: Init) -> ParamIdx {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::full(shape, T::lit(v)),
            Init::Msra | Init::Normal(_) => {
                let std = match init {
                    Init::Normal(std) => std,
                    _ => (2.0 / (shape.c * shape.h * shape.w).max(1) as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(&name));
                let data = (0..shape.numel()).map(|_| T::lit(normal.sample(&mut rng))).collect();
                Tensor::from_vec(shape, data).expect("shape volume")
            }
        };
        self.names.push(name);
        self.tensors.push(tensor);
        ParamIdx(self.tensors.len() - 1)
    }

    /// Seed the initial values were drawn from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamIdx> {
        self.names.iter().position(|n| n == name).map(ParamIdx)
    }

    pub fn name(&self, idx: ParamIdx) -> &str {
        &self.names[idx.0]
    }

    pub fn get(&self, idx: ParamIdx) -> &Tensor<T> {
        &self.tensors[idx.0]
    }

    pub fn get_mut(&mut self, idx: ParamIdx) -> &mut Tensor<T> {
        &mut self.tensors[idx.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamIdx, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamIdx(i), n.as_str(), t))
    }

    pub fn indices(&self) -> impl Iterator<Item = ParamIdx> {
        (0..self.tensors.len()).map(ParamIdx)
    }

    /// Inserts every parameter into `graph` as a gradient-requiring leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| graph.param(t.detached())).collect())
    }

    /// Inserts every parameter as a constant, for gradient-free evaluation.
    pub fn bind_constants(&self, graph: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| graph.constant(t.detached())).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect(), seed: self.seed }
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, idx: ParamIdx, data: Vec<T>) -> crate::Result<()> {
        let shape = self.tensors[idx.0].shape();
        self.tensors[idx.0] = Tensor::from_vec(shape, data)?;
        Ok(())
    }
}

/// Graph ids for a bound [`ParamStore`], indexable by [`ParamIdx`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<TensorId>);

impl Bound {
    pub fn id(&self, idx: ParamIdx) -> TensorId {
        self.0[idx.0]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.0
    }
}

//! SGD with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 bound on the gradient, applied before the update.
    pub max_grad_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { momentum: 0.9, weight_decay: 0.0005, max_grad_norm: Some(10.0) }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config(format!("max_grad_norm must be positive, got {:?}", self.max_grad_norm)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "optimizer needs momentum in [0, 1) and weight_decay >= 0, got {} / {}",
                self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One velocity buffer per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, config: SgdConfig) -> Self {
        let velocity = store.iter().map(|(_, _, t)| vec![T::zero(); t.shape().numel()]).collect();
        Sgd { config, velocity }
    }

    /// `v <- m v + g + wd p;  p <- p - lr v`, with `g` rescaled first if its
    /// global norm exceeds `max_grad_norm`. All gradients are checked before
    /// anything is updated.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.velocity.len() != store.len() {
            return Err(Error::invalid(format!(
                "sgd step: {} parameters, {} gradients, {} velocity buffers",
                store.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((_, name, t), g) in store.iter().zip(grads) {
            if g.len() != t.shape().numel() {
                return Err(Error::Length { expected: t.shape().numel(), actual: g.len() });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_owned()));
            }
        }
        let norm = grads.iter().flatten().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        let clip = match self.config.max_grad_norm {
            Some(c) if norm > c => T::lit(c / norm),
            _ => T::one(),
        };
        let (m, wd, lr) = (T::lit(self.config.momentum), T::lit(self.config.weight_decay), T::lit(lr));
        let indices: Vec<_> = store.indices().collect();
        for ((idx, g), v) in indices.into_iter().zip(grads).zip(&mut self.velocity) {
            let p = store.get_mut(idx).data_mut();
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = m * *v + clip * *g + wd * *p;
                *p = *p - lr * *v;
            }
        }
        Ok(())
    }
}

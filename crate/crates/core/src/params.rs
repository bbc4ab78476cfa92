//! Named parameter storage, gradient buffers and the AdamW optimizer.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    /// He-normal initialised weight with `fan_in` inputs.
    pub fn add_he<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = math::sqrt(2.0 / fan_in.max(1) as f64);
        let normal = Normal::new(0.0, std).expect("finite std");
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }
    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
    pub fn len(&self) -> usize {
        self.params.len()
    }
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }
    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrite values from `(name, tensor)` pairs. Every listed name must
    /// exist with an identical shape; on any mismatch nothing is assigned.
    pub fn assign_named(&mut self, entries: &[(String, Tensor)]) -> Result<usize> {
        let mut problems = Vec::new();
        let mut targets = Vec::with_capacity(entries.len());
        for (name, t) in entries {
            match self.find(name) {
                None => problems.push(alloc::format!("{name}: not a model parameter")),
                Some(id) if self.get(id).shape() != t.shape() => problems.push(alloc::format!(
                    "{name}: expected shape {:?}, got {:?}",
                    self.get(id).shape(),
                    t.shape()
                )),
                Some(id) => targets.push(id),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Weights(problems.join("; ")));
        }
        for (id, (_, t)) in targets.into_iter().zip(entries) {
            *self.get_mut(id) = t.clone();
        }
        Ok(entries.len())
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    grads: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads { grads: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        self.grads[id.0].add_assign(g);
    }
    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }
    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().for_each(|g| g.scale(factor));
    }
    pub fn global_norm(&self) -> f64 {
        math::sqrt(self.grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum())
    }
    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW { cfg, m: zeros(), v: zeros(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with learning rate `lr`. `lr == 0` leaves parameters
    /// bit-identical.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.steps += 1;
        if lr == 0.0 {
            return;
        }
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - math::powi(beta1, self.steps as i32);
        let bc2 = 1.0 - math::powi(beta2, self.steps as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            let g = grads.grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * mhat / (math::sqrt(vhat) + eps);
            }
        }
    }
}

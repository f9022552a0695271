//! Named store of trainable tensors and the Adam optimizer that updates them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tape::{Gradients, Graph, Mat, NodeId, ParamKey};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamKey {
        let name = name.into();
        assert!(self.key(&name).is_none(), "duplicate parameter `{name}`");
        self.names.push(name);
        self.values.push(value);
        ParamKey(self.values.len() - 1)
    }

    pub fn key(&self, name: &str) -> Option<ParamKey> {
        self.names.iter().position(|n| n == name).map(ParamKey)
    }

    pub fn get(&self, key: ParamKey) -> &Mat {
        &self.values[key.0]
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut Mat {
        &mut self.values[key.0]
    }

    pub fn name(&self, key: ParamKey) -> &str {
        &self.names[key.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> {
        (0..self.values.len()).map(ParamKey)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            hash_mat(&mut h, v);
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn hash_mat(h: &mut Sha256, m: &Mat) {
    h.update((m.nrows() as u64).to_le_bytes());
    h.update((m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
}

/// Binds each parameter to a graph leaf at most once per graph.
#[derive(Debug, Default)]
pub struct Binder {
    nodes: HashMap<ParamKey, NodeId>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&mut self, g: &mut Graph, store: &ParamStore, key: ParamKey) -> NodeId {
        *self
            .nodes
            .entry(key)
            .or_insert_with(|| g.param(key, store.get(key).clone()))
    }
}

/// Adam with L2-coupled weight decay (decay added to the gradient).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<ParamKey, Mat>,
    v: HashMap<ParamKey, Mat>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (key, grad) in grads.iter() {
            let theta = store.get_mut(key);
            let g = grad + &(theta.mapv(|x| x * self.weight_decay));
            let m = self
                .m
                .entry(key)
                .or_insert_with(|| Mat::zeros(theta.dim()));
            let v = self
                .v
                .entry(key)
                .or_insert_with(|| Mat::zeros(theta.dim()));
            ndarray::Zip::from(&mut *theta)
                .and(&mut *m)
                .and(&mut *v)
                .and(&g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

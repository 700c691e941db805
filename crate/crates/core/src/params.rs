//! Named parameter arrays, their graph bindings, and optimizers.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Ordered collection of named tensors. Order is insertion order and is the
/// order used by checkpoint blobs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(tensor);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (n, t) in self.iter() {
            out.insert(n, Tensor::zeros(t.shape()));
        }
        out
    }

    /// Rounds every value to the nearest `f32`, the precision of stored blobs.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Little-endian `f32` blob in store order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_elements() * 4);
        for t in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Adds `other` (same names, same order) into `self`.
    pub fn accumulate(&mut self, other: &ParamStore) {
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            t.add_assign(o);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Uniform `U(-bound, bound)` initializer.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Lazily binds store entries into a graph as leaves (trainable) or constants.
pub struct ParamView<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    trainable: bool,
    bound: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g, 's> ParamView<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            graph,
            store,
            trainable,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, name: &str) -> Var<'g> {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let mut bound = self.bound.borrow_mut();
        *bound[i].get_or_insert_with(|| {
            let t = self.store.tensors[i].clone();
            if self.trainable {
                self.graph.leaf(t)
            } else {
                self.graph.constant(t)
            }
        })
    }

    /// Gradients for every parameter (zeros for parameters that were not used).
    pub fn collect(&self, grads: &mut Gradients) -> ParamStore {
        let bound = self.bound.borrow();
        let mut out = ParamStore::new();
        for (i, (name, t)) in self.store.iter().enumerate() {
            let g = bound[i]
                .and_then(|v| grads.take(v))
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name, g);
        }
        out
    }
}

/// SGD with classical momentum: `v ← μ v + g; p ← p − lr · v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: ParamStore,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        for ((p, v), g) in params
            .tensors
            .iter_mut()
            .zip(self.velocity.tensors.iter_mut())
            .zip(&grads.tensors)
        {
            let (pd, vd) = (p.data_mut(), v.data_mut());
            for ((pv, vv), gv) in pd.iter_mut().zip(vd.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, m), v), g) in params
            .tensors
            .iter_mut()
            .zip(self.m.tensors.iter_mut())
            .zip(self.v.tensors.iter_mut())
            .zip(&grads.tensors)
        {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((pv, mv), vv), gv) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(g.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}

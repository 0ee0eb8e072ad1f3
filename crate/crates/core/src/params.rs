//! Named parameter storage, per-tape binding and the AdamW optimizer.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), v))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let v = ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng));
        self.add(name, v)
    }

    pub fn normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let v = ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng));
        self.add(name, v)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Round every value through `f32`, the precision used on disk.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    /// Replace values from `(name, array)` pairs. Every parameter must be
    /// provided exactly once with a matching shape.
    pub fn load_named(&mut self, entries: impl IntoIterator<Item = (String, ArrayD<f64>)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, value) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::domain(format!("unexpected parameter `{name}`")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::domain(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = value;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::domain(format!("missing parameter `{}`", self.names[missing])));
        }
        Ok(())
    }
}

/// Lazily copies parameters onto a tape the first time they are used.
#[derive(Debug)]
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        *self.bound[id.0].get_or_insert_with(|| tape.leaf(self.store.get(id).clone()))
    }

    /// Pull the gradients of every bound parameter out of `grads`.
    pub fn collect(&self, grads: &mut Gradients) -> GradStore {
        let mut out = GradStore::zeros_like(self.store);
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.take(*v) {
                    out.grads[i] = Some(g);
                }
            }
        }
        out
    }
}

/// Accumulated gradients, aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, other: GradStore) {
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => *m += &t,
                (None, Some(t)) => *mine = Some(t),
                _ => {}
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adam with decoupled weight decay. Decay applies only to arrays with two or
/// more dimensions (weights, not biases, norms or embeddings vectors).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = |s: &ParamStore| s.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect();
        Self {
            config,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..store.len() {
            let Some(g) = &grads.grads[i] else { continue };
            let p = &mut store.values[i];
            let decay = if p.ndim() >= 2 { c.weight_decay } else { 0.0 };
            if decay > 0.0 {
                p.mapv_inplace(|x| x * (1.0 - c.learning_rate * decay));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            });
        }
    }
}

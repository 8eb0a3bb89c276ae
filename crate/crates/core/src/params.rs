//! Named parameter storage, graph binding, and the Adam optimizer.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the weight initializer.
pub const INIT_STD: f64 = 0.2;

/// Trainable tensors keyed by name, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: IndexMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter {name}")));
        }
        self.map.insert(name, value);
        Ok(())
    }

    /// Weight drawn from `N(0, INIT_STD^2)`.
    pub fn weight<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> Result<()> {
        self.insert(name, Tensor::randn(shape, INIT_STD, rng))
    }

    pub fn bias(&mut self, name: &str, len: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(&[len]))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid("param_store", format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::invalid("param_store", format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Add every entry of `other`, failing on name clashes.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.map {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Put every parameter in `g`, as gradient-tracked leaves when `trainable`.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let t = v.cast::<T>();
                let var = if trainable { g.variable(t) } else { g.constant(t) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.map
            .iter()
            .map(|(k, v)| other.map.get(k).map_or(f64::INFINITY, |o| v.max_abs_diff(o)))
            .fold(0.0, f64::max)
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("bind", format!("parameter {name} not bound")))
    }

    pub fn merge(mut self, other: Bound) -> Bound {
        self.vars.extend(other.vars);
        self
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| ParamStore {
            map: p
                .map
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        };
        AdamState {
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }
}

/// Gradients with respect to named parameters.
pub type NamedGrads = IndexMap<String, Tensor<f32>>;

/// Collect gradients for every bound parameter; unreached parameters get zeros.
pub fn collect_grads<T: Real>(params: &ParamStore, bound: &Bound, grads: &Gradients<T>) -> Result<NamedGrads> {
    let mut out = IndexMap::new();
    for (name, p) in params.iter() {
        let v = bound.get(name)?;
        let g = match grads.get(v) {
            Some(g) => g.cast::<f32>(),
            None => Tensor::zeros(p.shape()),
        };
        out.insert(name.to_string(), g);
    }
    Ok(out)
}

/// One bias-corrected Adam update of every parameter named in `grads`.
pub fn adam_step(params: &mut ParamStore, grads: &NamedGrads, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        let m = state.m.get(name)?;
        let v = state.v.get(name)?;
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape("adam_step", format!("{name}: optimizer state shape")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let m = state.m.get_mut(name)?;
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = (cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi as f64) as f32;
        }
        let v = state.v.get_mut(name)?;
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            let gi = gi as f64;
            *vi = (cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * gi * gi) as f32;
        }
        let m = state.m.get(name)?.data().to_vec();
        let v = state.v.get(name)?.data().to_vec();
        let p = params.get_mut(name)?;
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(&m).zip(&v) {
            let mhat = mi as f64 / bc1;
            let vhat = vi as f64 / bc2;
            *pi = (*pi as f64 - cfg.lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}

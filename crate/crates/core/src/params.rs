//! Named parameter registry and its binding into a [`Graph`].

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered `name -> tensor` registry. Insertion order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Number of registered tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Sets every parameter to `value`.
    pub fn fill(&mut self, value: f64) {
        for t in self.params.values_mut() {
            t.data_mut().fill(value);
        }
    }
}

/// Weight initialisers. Each draws from the supplied generator in flat order.
pub(crate) mod init {
    use super::*;

    /// He-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, used for dense projections.
    pub fn lecun_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
    }
}

/// A forward pass in progress: a graph plus lazily inserted parameter leaves.
pub struct Bound<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    vars: IndexMap<String, Var>,
    track: bool,
}

impl<'s> Bound<'s> {
    /// With `track` false, parameters enter the graph as constants (inference).
    pub fn new(store: &'s ParamStore, track: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            vars: IndexMap::new(),
            track,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.graph.leaf(t, self.track);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_opt(&mut self, name: &str) -> Result<Option<Var>> {
        if self.store.get(name).is_ok() {
            self.param(name).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Parameters touched by this pass, in first-use order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradient of each touched parameter after `graph.backward`.
    pub fn grads(&self) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| self.graph.grad(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

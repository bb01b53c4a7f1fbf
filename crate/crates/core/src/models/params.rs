use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with standard deviation `sqrt(gain / fan_in)`.
    FanInNormal { fan_in: usize, gain: f64 },
    Constant(f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named, ordered model parameters with gradient slots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every parameter from its [`Init`] with one seeded stream, in spec order.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in specs {
            let t = match spec.init {
                Init::Constant(v) => Tensor::full(spec.shape.clone(), v)?,
                Init::FanInNormal { fan_in, gain } => {
                    let std = (gain / fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid("init", e.to_string()))?;
                    Tensor::from_fn(spec.shape.clone(), |_| normal.sample(&mut rng) as f32)?
                }
            };
            store.insert(spec.name.clone(), t);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
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

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Puts every parameter on `tape` as a leaf, cast to the tape's element type.
    pub fn bind<E: Element>(&self, tape: &mut Tape<E>, requires_grad: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.cast::<E>(), requires_grad)))
            .collect();
        BoundParams { vars }
    }

    /// Adds the gradients recorded for `bound` into each parameter's grad slot.
    pub fn accumulate_grads<E: Element>(&mut self, grads: &Gradients<E>, bound: &BoundParams) -> Result<()> {
        self.accumulate_scaled_grads(grads, bound, 1.0)
    }

    /// Adds `scale` times the recorded gradients.
    pub fn accumulate_scaled_grads<E: Element>(
        &mut self,
        grads: &Gradients<E>,
        bound: &BoundParams,
        scale: f64,
    ) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let var = bound.get(name)?;
            if let Some(g) = grads.get(var) {
                let g: Vec<f32> = g.data().iter().map(|v| (v.as_f64() * scale) as f32).collect();
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }
}

/// Tape handles of a bound [`ParamStore`], looked up by parameter name.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }
}

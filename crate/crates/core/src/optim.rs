//! Adam with bias correction.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::checkpoint::{load_named, save_named};
use crate::models::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.0006;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub t: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    t: u64,
    #[serde(flatten)]
    hyper: AdamHyper,
}

const META_FILE: &str = "optimizer.toml";

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(hyper: AdamHyper, params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape().to_vec()).expect("parameter shape");
        Self {
            hyper,
            t: 0,
            m: params.iter().map(|(n, t)| (n.to_string(), zeros(t))).collect(),
            v: params.iter().map(|(n, t)| (n.to_string(), zeros(t))).collect(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_named(dir, "adam_m", self.m.iter().map(|(k, t)| (k.as_str(), t)))?;
        save_named(dir, "adam_v", self.v.iter().map(|(k, t)| (k.as_str(), t)))?;
        let meta = StateMeta {
            t: self.t,
            hyper: self.hyper,
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let path = dir.join(META_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: StateMeta = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let m = load_named(dir, "adam_m")?;
        let v = load_named(dir, "adam_v")?;
        if m.keys().ne(v.keys()) {
            return Err(Error::Format("first and second moment names differ".into()));
        }
        Ok(Self {
            hyper: meta.hyper,
            t: meta.t,
            m,
            v,
        })
    }

    fn check(&self, params: &ParamStore) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("optimizer tracks {} tensors, model has {}", self.m.len(), params.len()),
            ));
        }
        for (name, p) in params.iter() {
            let m = self.m.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            if m.shape() != p.shape() {
                return Err(Error::InvalidShape {
                    shape: p.shape().to_vec(),
                    reason: format!("parameter `{name}` does not match optimizer state {:?}", m.shape()),
                });
            }
            let g = p.grad().ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        Ok(())
    }
}

/// One Adam update from the gradients stored on each parameter. Nothing is
/// modified unless every parameter passes validation.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    state.check(params)?;
    state.t += 1;
    let AdamHyper { lr, beta1, beta2, eps } = state.hyper;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g: Vec<f32> = p.grad().expect("checked").to_vec();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            let mn = beta1 * *m as f64 + (1.0 - beta1) * g;
            let vn = beta2 * *v as f64 + (1.0 - beta2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

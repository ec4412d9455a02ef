//! Adam with explicit, serializable moment state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One parameter group: a base learning rate plus first and second moment
/// estimates for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    name: String,
    config: AdamConfig,
    base_lr: f64,
    last_lr: f64,
    steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(name: &str, params: &ParamStore, base_lr: f64, config: AdamConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, var) in params.iter() {
            m.insert(k.clone(), var.as_tensor().zeros_like()?);
            v.insert(k.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            name: name.to_string(),
            config,
            base_lr,
            last_lr: base_lr,
            steps: 0,
            m,
            v,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    /// Learning rate used by the most recent step.
    pub fn last_lr(&self) -> f64 {
        self.last_lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `base_lr · lr_factor`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr_factor: f64) -> Result<()> {
        self.steps += 1;
        let lr = self.base_lr * lr_factor;
        self.last_lr = lr;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2_sqrt = (1.0 - beta2.powi(t)).sqrt();
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match (self.m.get(name), self.v.get(name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::Contract(format!("{}: no optimizer state for {name}", self.name))),
            };
            let m = ((m * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((v.sqrt()? / bc2_sqrt)? + eps)?;
            let update = ((&m / denom)? * (lr / bc1))?;
            var.set(&(var.as_tensor() - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors named `optim.{group}.m.{param}` / `optim.{group}.v.{param}`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (k, t) in &self.m {
            out.push((format!("optim.{}.m.{k}", self.name), t.clone()));
        }
        for (k, t) in &self.v {
            out.push((format!("optim.{}.v.{k}", self.name), t.clone()));
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, steps: u64) -> Result<()> {
        for (slot, kind) in [(&mut self.m, "m"), (&mut self.v, "v")] {
            for (k, t) in slot.iter_mut() {
                let key = format!("optim.{}.{kind}.{k}", self.name);
                let value = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                if value.dims() != t.dims() {
                    return Err(Error::dim(key, t.dims(), value.dims()));
                }
                *t = value.clone();
            }
        }
        self.steps = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn matches_reference_update() -> Result<()> {
        let mut store = ParamStore::new();
        let w = Var::new(&[1.0f32, -2.0, 0.5], &Device::Cpu)?;
        store.insert("w".into(), w.clone())?;
        let cfg = AdamConfig::default();
        let mut opt = Adam::new("g", &store, 0.1, cfg)?;
        // scalar reference of the same recurrences in f64
        let mut p = [1.0f64, -2.0, 0.5];
        let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
        for t in 1..=3 {
            let loss = w.as_tensor().sqr()?.sum_all()?;
            opt.step(&store, &loss.backward()?, 1.0)?;
            for i in 0..3 {
                let g = 2.0 * p[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mh = m[i] / (1.0 - cfg.beta1.powi(t));
                let vh = v[i] / (1.0 - cfg.beta2.powi(t));
                p[i] -= 0.1 * mh / (vh.sqrt() + cfg.eps);
            }
        }
        let got = w.as_tensor().to_vec1::<f32>()?;
        for (a, b) in got.iter().zip(p) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert_eq!(opt.steps(), 3);
        Ok(())
    }
}

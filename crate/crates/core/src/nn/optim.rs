use std::collections::BTreeMap;
use std::f64::consts::PI;

use candle_core::{backprop::GradStore, Tensor};
use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are keyed by parameter name
/// so they can round-trip through a checkpoint.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`, skipping frozen groups.
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        lr: f64,
        frozen: &[ParamGroup],
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, var, group) in store.iter() {
            if frozen.contains(&group) {
                continue;
            }
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.first.get(name) {
                Some(m) => ((m * self.cfg.beta1)? + (g * (1.0 - self.cfg.beta1))?)?,
                None => (g * (1.0 - self.cfg.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.cfg.beta2)? + (g.sqr()? * (1.0 - self.cfg.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.cfg.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let decayed = (var.as_tensor() * (1.0 - lr * self.cfg.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.first.insert(name.to_string(), m);
            self.second.insert(name.to_string(), v);
        }
        Ok(())
    }

    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.first {
            out.insert(format!("adamw.m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("adamw.v.{k}"), v.clone());
        }
        out
    }

    pub fn restore(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (k, v) in tensors {
            if let Some(name) = k.strip_prefix("adamw.m.") {
                self.first.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("adamw.v.") {
                self.second.insert(name.to_string(), v.clone());
            }
        }
    }
}

/// Cosine annealing from `base` at step 0 to `min` at `total` steps.
pub fn cosine_lr(base: f64, min: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total) as f64) / total as f64;
    min + 0.5 * (base - min) * (1.0 + (PI * progress).cos())
}

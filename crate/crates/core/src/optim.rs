//! AdamW with decoupled weight decay, gradient accumulation and clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Gradients summed over several backward passes, keyed by `group/param`.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    grads: BTreeMap<String, Tensor>,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the gradient of every parameter of `weights` found in `store`,
    /// scaled by `scale`. Parameters the loss does not reach are skipped.
    pub fn add(&mut self, group: &str, weights: &ModelWeights, store: &GradStore, scale: f64) -> Result<()> {
        for (name, var) in weights.iter() {
            if let Some(g) = store.get(var.as_tensor()) {
                let g = (g.detach() * scale)?;
                let key = format!("{group}/{name}");
                let sum = match self.grads.remove(&key) {
                    Some(prev) => (prev + g)?,
                    None => g,
                };
                self.grads.insert(key, sum);
            }
        }
        Ok(())
    }

    pub fn get(&self, group: &str, name: &str) -> Option<&Tensor> {
        self.grads.get(&format!("{group}/{name}"))
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    pub fn global_norm(&self) -> Result<f64> {
        let mut sq = 0.0;
        for g in self.grads.values() {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(sq.sqrt())
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip(&mut self, max_norm: f64) -> Result<f64> {
        let norm = self.global_norm()?;
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.grads.values_mut() {
                *g = (&*g * s)?;
            }
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub t: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update to every parameter of `weights` that has a
    /// gradient. `lr_of` maps a parameter name to its learning rate. Weight
    /// decay applies to matrices and convolution kernels only. Call
    /// [`AdamW::begin_step`] once before updating the groups of a step.
    pub fn update_group(
        &mut self,
        group: &str,
        weights: &ModelWeights,
        grads: &GradAccumulator,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("begin_step must precede updates".into()));
        }
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in weights.iter() {
            let Some(g) = grads.get(group, name) else { continue };
            let key = format!("{group}/{name}");
            let g = g.to_dtype(var.dtype())?;
            let m = match self.m.get(&key) {
                Some(m) => ((m * beta1)? + (&g * (1.0 - beta1))?)?,
                None => (&g * (1.0 - beta1))?,
            };
            let v = match self.v.get(&key) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let lr = lr_of(name);
            let p = var.as_tensor();
            let decayed = if var.rank() >= 2 && weight_decay != 0.0 {
                (p * (1.0 - lr * weight_decay))?
            } else {
                p.clone()
            };
            let step = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            let next = (decayed - (step * lr)?)?;
            var.set(&next.detach())?;
            self.m.insert(key.clone(), m.detach());
            self.v.insert(key, v.detach());
        }
        Ok(())
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Moment estimates as two weight stores, for checkpointing.
    pub fn state(&self) -> Result<(ModelWeights, ModelWeights)> {
        let mut m = ModelWeights::new();
        let mut v = ModelWeights::new();
        for (k, t) in &self.m {
            m.insert(k.replace('/', "::"), Var::from_tensor(&t.copy()?)?)?;
        }
        for (k, t) in &self.v {
            v.insert(k.replace('/', "::"), Var::from_tensor(&t.copy()?)?)?;
        }
        Ok((m, v))
    }

    pub fn restore(cfg: AdamWConfig, t: usize, m: &ModelWeights, v: &ModelWeights) -> Self {
        let load = |w: &ModelWeights| {
            w.iter()
                .map(|(k, var)| (k.replace("::", "/"), var.as_tensor().detach()))
                .collect::<BTreeMap<_, _>>()
        };
        AdamW { cfg, t, m: load(m), v: load(v) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;

    #[test]
    fn single_step_matches_hand_computation() {
        let mut init = Init::new(0, DType::F64);
        init.constant("w", &[1, 2], 1.0).unwrap();
        init.constant("b", &[2], 1.0).unwrap();
        let w = init.finish();
        let loss = (w.get("w").unwrap().sum_all().unwrap() * 2.0).unwrap();
        let loss = (loss + w.get("b").unwrap().sum_all().unwrap()).unwrap();
        let store = loss.backward().unwrap();
        let mut acc = GradAccumulator::new();
        acc.add("g", &w, &store, 1.0).unwrap();
        let cfg = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 };
        let mut opt = AdamW::new(cfg);
        opt.begin_step();
        opt.update_group("g", &w, &acc, |_| 0.01).unwrap();
        // First bias-corrected Adam step is lr * g / (|g| + eps) = lr * sign(g).
        let wv = w.get("w").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expect_w = 1.0 * (1.0 - 0.01 * 0.1) - 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((wv[0] - expect_w).abs() < 1e-12);
        let bv = w.get("b").unwrap().to_vec1::<f64>().unwrap();
        let expect_b = 1.0 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((bv[0] - expect_b).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut init = Init::new(0, DType::F64);
        init.constant("w", &[3], 1.0).unwrap();
        let w = init.finish();
        let loss = (w.get("w").unwrap().sum_all().unwrap() * 10.0).unwrap();
        let store = loss.backward().unwrap();
        let mut acc = GradAccumulator::new();
        acc.add("g", &w, &store, 1.0).unwrap();
        let before = acc.clip(1.0).unwrap();
        assert!((before - 300f64.sqrt()).abs() < 1e-9);
        assert!((acc.global_norm().unwrap() - 1.0).abs() < 1e-9);
    }
}

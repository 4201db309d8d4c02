//! Adam with explicit, serializable moment state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_tensors, save_tensors};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

const STEP_KEY: &str = "adam_step";

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { cfg, vars, m, v, step: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let scale = match self.cfg.grad_clip {
            Some(max_norm) => {
                let mut sq = 0f64;
                for (_, var) in &self.vars {
                    if let Some(g) = grads.get(var.as_tensor()) {
                        sq += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
                    }
                }
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / (norm + 1e-12)
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let AdamConfig { lr, beta1, beta2, eps, weight_decay, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            let m = ((&self.m[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            let mut p = (var.as_tensor() - (update * lr)?)?;
            if weight_decay > 0.0 {
                p = (p - (var.as_tensor() * (lr * weight_decay))?)?;
            }
            var.set(&p)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut t = BTreeMap::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            t.insert(format!("m.{name}"), self.m[i].clone());
            t.insert(format!("v.{name}"), self.v[i].clone());
        }
        let meta = HashMap::from([(STEP_KEY.to_string(), self.step.to_string())]);
        save_tensors(path, &t, meta)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let (mut t, meta) = load_tensors(path)?;
        let step = meta
            .get(STEP_KEY)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::checkpoint(path, "missing optimizer step"))?;
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}.{name}");
                let Some(x) = t.remove(&key) else {
                    return Err(Error::checkpoint(path, format!("missing {key}")));
                };
                if x.dims() != var.dims() {
                    return Err(Error::checkpoint(path, format!("{key}: shape mismatch")));
                }
                *slot = x;
            }
        }
        if !t.is_empty() {
            return Err(Error::checkpoint(path, "unexpected optimizer tensors"));
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let var = Var::new(&[1.0f32, -2.0, 3.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("w".into(), var.clone())], AdamConfig { lr: 0.1, ..AdamConfig::default() }).unwrap();
        let loss = (var.as_tensor() * &Tensor::new(&[2.0f32, -3.0, 0.5], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let got = var.as_tensor().to_vec1::<f32>().unwrap();
        for (g, w) in got.iter().zip([0.9f32, -1.9, 2.9]) {
            assert!((g - w).abs() < 1e-5, "{got:?}");
        }
    }

    #[test]
    fn minimizes_quadratic_and_round_trips_state() {
        let dir = tempfile::tempdir().unwrap();
        let var = Var::new(&[5.0f32, -4.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("w".into(), var.clone())], AdamConfig { lr: 0.1, ..AdamConfig::default() }).unwrap();
        for _ in 0..300 {
            let g = var.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
            opt.step(&g).unwrap();
        }
        assert!(var.as_tensor().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap() < 0.05);
        opt.save(&dir.path().join("o.safetensors")).unwrap();
        let mut other = Adam::new(vec![("w".into(), var.clone())], AdamConfig::default()).unwrap();
        other.load(&dir.path().join("o.safetensors")).unwrap();
        assert_eq!(other.steps_taken(), 300);
        assert_eq!(other.m[0].to_vec1::<f32>().unwrap(), opt.m[0].to_vec1::<f32>().unwrap());
    }
}

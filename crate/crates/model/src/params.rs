//! Named, seeded parameter storage.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{Device, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform on `[-b, b]`.
    Uniform(f64),
}

impl Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Trainable tensors keyed by dotted hierarchical names.
///
/// Cloning shares the underlying storage. Creation order fixes the random
/// stream, so identical construction code with the same seed yields identical
/// parameters.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    prefix: String,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            prefix: String::new(),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// A view whose names are prefixed with `name.`.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            inner: Arc::clone(&self.inner),
            prefix,
            device: self.device.clone(),
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Creates a parameter; names must be unique.
    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut inner = self.inner.lock().expect("parameter store poisoned");
        if inner.vars.contains_key(&full) {
            candle_core::bail!("duplicate parameter name {full}");
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(candle_core::Error::wrap)?;
                (0..n).map(|_| dist.sample(&mut inner.rng) as f32).collect()
            }
            Init::Uniform(b) => (0..n)
                .map(|_| inner.rng.random_range(-b..=b) as f32)
                .collect(),
        };
        let var = Var::from_vec(data, shape, &self.device)?;
        let t = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(t)
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("parameter store poisoned");
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        let inner = self.inner.lock().expect("parameter store poisoned");
        inner.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        let inner = self.inner.lock().expect("parameter store poisoned");
        inner.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Number of scalars under names starting with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        let inner = self.inner.lock().expect("parameter store poisoned");
        inner
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites every parameter from `tensors`. Names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().expect("parameter store poisoned");
        if tensors.len() != inner.vars.len() {
            candle_core::bail!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                inner.vars.len()
            );
        }
        for (name, var) in &inner.vars {
            let Some(t) = tensors.get(name) else {
                candle_core::bail!("checkpoint is missing {name}");
            };
            if t.dims() != var.dims() {
                candle_core::bail!("{name}: shape {:?} vs {:?}", t.dims(), var.dims());
            }
            var.set(t)?;
        }
        Ok(())
    }

    /// Detached copies of all parameters.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let inner = self.inner.lock().expect("parameter store poisoned");
        inner
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_prefixed() {
        let make = |seed| {
            let ps = ParamStore::new(seed);
            let a = ps.pp("a").get("w", &[3, 4], Init::Normal(1.0)).unwrap();
            let b = ps.pp("a").pp("b").get("w", &[2], Init::fan_in(4)).unwrap();
            (ps, a, b)
        };
        let (ps, a, b) = make(7);
        let (_, a2, _) = make(7);
        let (_, a3, _) = make(8);
        let names: Vec<_> = ps.vars().into_iter().map(|(k, _)| k).collect();
        assert_eq!(names, vec!["a.b.w", "a.w"]);
        assert_eq!(a.to_vec2::<f32>().unwrap(), a2.to_vec2::<f32>().unwrap());
        assert_ne!(a.to_vec2::<f32>().unwrap(), a3.to_vec2::<f32>().unwrap());
        assert!(b.to_vec1::<f32>().unwrap().iter().all(|v| v.abs() <= 0.5));
        assert_eq!(ps.num_params(), 14);
        assert!(ps.pp("a").get("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn snapshot_load_round_trip() {
        let ps = ParamStore::new(1);
        let w = ps.get("w", &[5], Init::Normal(1.0)).unwrap();
        let snap = ps.snapshot().unwrap();
        ps.all_vars()[0].set(&w.zeros_like().unwrap()).unwrap();
        ps.load(&snap).unwrap();
        assert_eq!(
            ps.all_vars()[0].as_tensor().to_vec1::<f32>().unwrap(),
            snap["w"].to_vec1::<f32>().unwrap()
        );
    }
}

//! Named parameters, seeded initialization, and the Adam optimizer.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Parameters keyed by dotted path, created in a fixed order from a seeded
/// stream so that two stores built with the same seed are identical.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    frozen: bool,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Const(f64),
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
            frozen: false,
        }
    }

    pub fn from_tensors(tensors: HashMap<String, Tensor>) -> Result<Self> {
        let mut vars = BTreeMap::new();
        let mut dtype = DType::F32;
        for (name, t) in tensors {
            dtype = t.dtype();
            vars.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self {
            vars,
            rng: ChaCha8Rng::seed_from_u64(0),
            dtype,
            device: Device::Cpu,
            frozen: true,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the named parameter, creating it on first use. Once a store
    /// is frozen (loaded from disk), unknown names are an error.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.vars.get(name) {
            if var.dims() != shape {
                return Err(Error::contract(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    var.dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        if self.frozen {
            return Err(Error::config(format!("checkpoint has no parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        Self::from_tensors(tensors)
    }

    /// Copies values from `other` for every shared name.
    pub fn assign_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in &self.vars {
            let src = other
                .vars
                .get(name)
                .ok_or_else(|| Error::config(format!("checkpoint has no parameter {name}")))?;
            var.set(src.as_tensor())?;
        }
        Ok(())
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`; returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<f64> {
        let mut sq = 0.0f64;
        let mut present = Vec::new();
        for (name, var) in params.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                present.push((name, var, g));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged(format!("gradient norm is {norm}")));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var, g) in present {
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            let (m, v) = match self.moments.remove(name.as_str()) {
                Some(mv) => mv,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            if lr != 0.0 {
                let m_hat = (&m / bc1)?;
                let v_hat = (&v / bc2)?;
                let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
                var.set(&(var.as_tensor() - (update * lr)?)?)?;
            }
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for (name, (m, v)) in &self.moments {
            tensors.insert(format!("m.{name}"), m.clone());
            tensors.insert(format!("v.{name}"), v.clone());
        }
        tensors.insert(
            "__step".to_string(),
            Tensor::new(&[self.step as f64], &Device::Cpu)?,
        );
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut adam = Adam::default();
        let mut firsts: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut seconds: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in tensors {
            if name == "__step" {
                adam.step = t.to_vec1::<f64>()?[0] as u64;
            } else if let Some(rest) = name.strip_prefix("m.") {
                firsts.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("v.") {
                seconds.insert(rest.to_string(), t);
            }
        }
        for (name, m) in firsts {
            let v = seconds
                .remove(&name)
                .ok_or_else(|| Error::config(format!("optimizer state missing v.{name}")))?;
            adam.moments.insert(name, (m, v));
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let mut a = ParamStore::new(11, DType::F32);
        let mut b = ParamStore::new(11, DType::F32);
        let ta = a.get("w", &[3, 4], Init::Normal(1.0)).unwrap();
        let tb = b.get("w", &[3, 4], Init::Normal(1.0)).unwrap();
        assert_eq!(ta.to_vec2::<f32>().unwrap(), tb.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new(0, DType::F64);
        let w = store.get("w", &[2], Init::Const(3.0)).unwrap();
        let mut adam = Adam::default();
        for _ in 0..500 {
            let loss = w.sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            adam.step(&store, &grads, 0.05).unwrap();
        }
        let v = w.to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut store = ParamStore::new(0, DType::F64);
        let w = store.get("w", &[2], Init::Const(3.0)).unwrap();
        let mut adam = Adam::default();
        let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        adam.step(&store, &grads, 0.0).unwrap();
        assert_eq!(w.to_vec1::<f64>().unwrap(), vec![3.0, 3.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new(0, DType::F32);
        let w = store.get("w", &[2], Init::Const(1.0)).unwrap();
        let mut adam = Adam::default();
        let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        adam.step(&store, &grads, 0.1).unwrap();
        let path = dir.path().join("opt.safetensors");
        adam.save(&path).unwrap();
        let loaded = Adam::load(&path).unwrap();
        assert_eq!(loaded.steps(), 1);
        let (m0, _) = &adam.moments["w"];
        let (m1, _) = &loaded.moments["w"];
        assert_eq!(m0.to_vec1::<f32>().unwrap(), m1.to_vec1::<f32>().unwrap());
    }
}

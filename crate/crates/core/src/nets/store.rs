//! Deterministic parameter storage.
//!
//! candle's own `VarMap` draws initial values from a thread-local RNG. The store
//! here derives every tensor from `(seed, parameter name)` so that two builds of
//! the same architecture under the same seed are bit-identical no matter in which
//! order the layers ask for their weights.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Result, XaiError};
use crate::fingerprint::{derive_seed_str, Fingerprinter};

#[derive(Clone)]
pub struct SeededStore {
    vars: VarMap,
    seed: u64,
}

impl SeededStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: VarMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn var_map(&self) -> &VarMap {
        &self.vars
    }

    pub fn builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), DType::F32, Device::Cpu)
    }

    /// Trainable variables, i.e. everything except batch-norm running statistics.
    pub fn trainable(&self) -> Vec<Var> {
        let data = self.vars.data().lock().expect("var map poisoned");
        let mut named: Vec<(&String, &Var)> = data
            .iter()
            .filter(|(k, _)| !k.ends_with("running_mean") && !k.ends_with("running_var"))
            .collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        let data = self.vars.data().lock().expect("var map poisoned");
        let mut names: Vec<String> = data.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let data = self.vars.data().lock().expect("var map poisoned");
        data.get(name).map(|v| v.as_tensor().clone())
    }

    pub fn parameter_count(&self) -> usize {
        let data = self.vars.data().lock().expect("var map poisoned");
        data.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over every parameter in name order.
    pub fn fingerprint(&self) -> Result<String> {
        let mut fp = Fingerprinter::new();
        for name in self.names() {
            let t = self.get(&name).expect("listed name");
            fp.update(&name);
            fp.update_f32s(&t.flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(fp.finish())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.vars.save(path.as_ref())?;
        Ok(())
    }

    /// Overwrites parameters with tensors from a safetensors or PyTorch pickle file.
    ///
    /// `rename` maps a local parameter name to the name used in the file; returning
    /// `None` skips the parameter. Every non-skipped parameter must be present with a
    /// matching shape.
    pub fn load_from(
        &self,
        path: impl AsRef<Path>,
        rename: impl Fn(&str) -> Option<String>,
    ) -> Result<usize> {
        let path = path.as_ref();
        let tensors = read_tensor_file(path)?;
        let data = self.vars.data().lock().expect("var map poisoned");
        let mut loaded = 0;
        let mut missing = Vec::new();
        for (name, var) in data.iter() {
            let Some(source) = rename(name) else { continue };
            match tensors.get(&source) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(XaiError::Architecture(format!(
                            "{}: `{source}` has shape {:?}, model expects {:?}",
                            path.display(),
                            t.dims(),
                            var.dims()
                        )));
                    }
                    var.set(&t.to_dtype(DType::F32)?)?;
                    loaded += 1;
                }
                None => missing.push(source),
            }
        }
        if !missing.is_empty() {
            missing.sort();
            return Err(XaiError::Architecture(format!(
                "{} lacks {} parameters, first: {}",
                path.display(),
                missing.len(),
                missing[0]
            )));
        }
        Ok(loaded)
    }

    fn generate(&self, shape: &Shape, name: &str, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(self.seed, name));
        let values: Vec<f32> = match init {
            Init::Const(c) => vec![c as f32; n],
            Init::Uniform { lo, up } => sample_uniform(&mut rng, lo, up, n),
            Init::Randn { mean, stdev } => sample_normal(&mut rng, mean, stdev, n),
            Init::Kaiming { dist, fan, non_linearity: non_lin } => {
                let fan = match fan {
                    FanInOut::FanIn => FanInOut::FanIn.for_shape(shape),
                    FanInOut::FanOut => FanInOut::FanOut.for_shape(shape),
                };
                let std = non_lin.gain() / (fan.max(1) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => sample_normal(&mut rng, 0.0, std, n),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        sample_uniform(&mut rng, -bound, bound, n)
                    }
                }
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &Device::Cpu)?)
    }
}

fn sample_uniform(rng: &mut ChaCha8Rng, lo: f64, up: f64, n: usize) -> Vec<f32> {
    if up <= lo {
        return vec![lo as f32; n];
    }
    let d = Uniform::new(lo, up).expect("bounds ordered");
    (0..n).map(|_| d.sample(rng) as f32).collect()
}

fn sample_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64, n: usize) -> Vec<f32> {
    let d = Normal::new(mean, std.max(0.0)).expect("finite std");
    (0..n).map(|_| d.sample(rng) as f32).collect()
}

/// Reads every tensor of a `.safetensors` file or a PyTorch `.pt`/`.pth` state dict.
pub fn read_tensor_file(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(XaiError::MissingSource(format!(
            "weights file {} not found",
            path.display()
        )));
    }
    let is_safetensors = path
        .extension()
        .map(|e| e == "safetensors")
        .unwrap_or(false);
    if is_safetensors {
        Ok(candle_core::safetensors::load(path, &Device::Cpu)?)
    } else {
        let tensors = candle_core::pickle::read_all(path)?;
        Ok(tensors.into_iter().collect())
    }
}

impl SimpleBackend for SeededStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut data = self.vars.data().lock().expect("var map poisoned");
        if let Some(var) = data.get(name) {
            let t = var.as_tensor();
            if t.shape() != &s {
                candle_core::bail!(
                    "parameter `{name}` requested with shape {s:?}, stored {:?}",
                    t.shape()
                );
            }
            return t.to_dtype(dtype)?.to_device(dev);
        }
        let t = self
            .generate(&s, name, h)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().to_dtype(dtype)?.to_device(dev)?;
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let data = self.vars.data().lock().expect("var map poisoned");
        match data.get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype)?.to_device(dev),
            None => candle_core::bail!("parameter `{name}` has no stored value"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars
            .data()
            .lock()
            .expect("var map poisoned")
            .contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values_regardless_of_order() {
        let a = SeededStore::new(5);
        let b = SeededStore::new(5);
        let va = a.builder();
        let vb = b.builder();
        let x1 = va.get_with_hints((3, 4), "x", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        let _ = vb.get_with_hints(7, "y", Init::Randn { mean: 0.0, stdev: 1.0 }).unwrap();
        let x2 = vb.get_with_hints((3, 4), "x", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        let d = (x1 - x2).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn different_seed_differs() {
        let a = SeededStore::new(1).builder().get_with_hints(16, "w", Init::Randn { mean: 0.0, stdev: 1.0 }).unwrap();
        let b = SeededStore::new(2).builder().get_with_hints(16, "w", Init::Randn { mean: 0.0, stdev: 1.0 }).unwrap();
        assert_ne!(a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let a = SeededStore::new(3);
        a.builder().get_with_hints((2, 2), "p.weight", Init::Randn { mean: 0.0, stdev: 1.0 }).unwrap();
        a.save(&path).unwrap();
        let b = SeededStore::new(4);
        b.builder().get_with_hints((2, 2), "p.weight", Init::Randn { mean: 0.0, stdev: 1.0 }).unwrap();
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_eq!(b.load_from(&path, |n| Some(n.to_string())).unwrap(), 1);
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        let c = SeededStore::new(4);
        c.builder().get_with_hints(3, "q", Init::Const(0.0)).unwrap();
        assert!(c.load_from(&path, |n| Some(n.to_string())).is_err());
    }
}

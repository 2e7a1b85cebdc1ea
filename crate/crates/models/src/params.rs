//! Seeded parameter storage shared by all networks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::GroupNorm;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::conv::{Conv, ConvGeometry};
use crate::error::{ModelError, Result};

/// Named trainable variables with deterministic initialization.
///
/// Candle's CPU generator cannot be seeded, so every initial value is drawn
/// here from a ChaCha stream in creation order.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.vars.len())
            .field("scalars", &self.num_scalars())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(ModelError::arg(format!("parameter `{name}` defined twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Gaussian weights with standard deviation `sqrt(2 / fan_in)`.
    pub fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.normal(name, shape, std)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| ModelError::arg(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    /// `k x k` convolution with He-initialized weights and zero bias.
    pub fn conv2d(&mut self, name: &str, cin: usize, cout: usize, geo: ConvGeometry) -> Result<Conv> {
        let k = geo.kernel;
        let w = self.he_normal(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k)?;
        let b = self.constant(&format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Conv::new(w, Some(b), geo))
    }

    /// Convolution whose weights and bias start at exactly zero.
    pub fn conv2d_zeroed(&mut self, name: &str, cin: usize, cout: usize, geo: ConvGeometry) -> Result<Conv> {
        let k = geo.kernel;
        let w = self.constant(&format!("{name}.weight"), &[cout, cin, k, k], 0.0)?;
        let b = self.constant(&format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Conv::new(w, Some(b), geo))
    }

    pub fn group_norm(&mut self, name: &str, channels: usize, groups: usize) -> Result<GroupNorm> {
        let w = self.constant(&format!("{name}.weight"), &[channels], 1.0)?;
        let b = self.constant(&format!("{name}.bias"), &[channels], 0.0)?;
        Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Every scalar, in name order, widened to f64.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in self.vars.values() {
            out.extend(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> Result<f64> {
        Ok(self.flat_values()?.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }

    /// Projects every parameter into `[-c, c]`.
    pub fn clamp_all(&self, c: f64) -> Result<()> {
        for v in self.vars.values() {
            v.set(&v.as_tensor().clamp(-c, c)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f64 values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in &self.vars {
            h.update(name.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every parameter from a safetensors file holding exactly the
    /// same names and shapes.
    pub fn load(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)
            .map_err(|e| ModelError::checkpoint(path, e.to_string()))?;
        self.assign(&map).map_err(|e| match e {
            ModelError::Argument(msg) => ModelError::checkpoint(path, msg),
            other => other,
        })
    }

    pub fn assign(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(ModelError::arg(format!(
                "expected {} tensors, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| ModelError::arg(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(ModelError::arg(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer group. The image adapter trains with its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Visual,
    Other,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
}

/// Named, seeded parameter registry. Iteration order is by name.
#[derive(Debug)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: &[usize], group: ParamGroup) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidInput(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.params.insert(name.to_string(), Param { var, group });
        Ok(handle)
    }

    /// Uniform Glorot initialization for a `(d_in, d_out)` matrix.
    pub fn xavier(&mut self, name: &str, d_in: usize, d_out: usize, group: ParamGroup) -> Result<Tensor> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let values = (0..d_in * d_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.register(name, values, &[d_in, d_out], group)
    }

    /// Zero-mean uniform values with the given standard deviation.
    pub fn uniform(&mut self, name: &str, shape: &[usize], std: f64, group: ParamGroup) -> Result<Tensor> {
        let bound = std * 3f64.sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.register(name, values, shape, group)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> Result<Tensor> {
        self.constant(name, shape, 0.0, group)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> Result<Tensor> {
        self.constant(name, shape, 1.0, group)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, group: ParamGroup) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, vec![value; n], shape, group)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.var.elem_count()).sum()
    }

    /// Overwrites a parameter's values in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter `{name}`")))?;
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Flat copy of a parameter's values.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter `{name}`")))?;
        Ok(p.var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }

    /// Overwrites a parameter from flat values.
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter `{name}`")))?;
        let t = Tensor::from_slice(values, p.var.shape(), &self.device)?;
        p.var.set(&t.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

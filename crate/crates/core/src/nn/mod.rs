//! Small transformer building blocks on top of candle tensors.
//!
//! Activations are `(batch, length, width)`. Every layer reads its weights
//! from a [`ParamStore`], which also tags each parameter with the optimizer
//! group it belongs to.

mod attention;
mod checkpoint;
mod params;

pub use attention::{attention_probs, scaled_dot_attention, AttnMask, MultiHeadAttention, MASKED};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry, CheckpointManifest};
pub use params::{ParamGroup, ParamStore};

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};

/// `x @ weight + bias` over the last axis; `weight` is `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, group: ParamGroup) -> Result<Self> {
        let weight = store.xavier(&format!("{name}.weight"), d_in, d_out, group)?;
        let bias = Some(store.zeros(&format!("{name}.bias"), &[d_out], group)?);
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::Shape("linear input is a scalar".into()))?;
        if d_in != self.in_dim() {
            return Err(Error::Shape(format!("linear expects width {}, got {d_in}", self.in_dim())));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// `(x - mean) / sqrt(var + eps)` over the last axis (biased variance).
pub fn normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.ones(&format!("{name}.gamma"), &[d], ParamGroup::Other)?,
            beta: store.zeros(&format!("{name}.beta"), &[d], ParamGroup::Other)?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xhat = normalize(x, self.eps)?;
        Ok(xhat.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Two-layer ReLU feed-forward.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), d, d_ff, ParamGroup::Other)?,
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d, ParamGroup::Other)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.outer.forward(&self.inner.forward(x)?.relu()?)
    }
}

/// Numerically safe logistic function.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Softmax over the last axis. The row maximum is subtracted as a constant.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Rejects tensors holding NaN or infinities.
pub fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let total = x.to_dtype(DType::F64)?.flatten_all()?.sum_all()?.to_scalar::<f64>()?;
    if total.is_finite() {
        return Ok(());
    }
    // a finite tensor can still overflow the sum
    let values = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Id tensor of shape `(rows, cols)` from row-major `u32` ids.
pub fn id_tensor(ids: &[u32], rows: usize, cols: usize, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(ids, (rows, cols), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let x = Tensor::new(&[[1.0f64, 2.0, 4.0, 8.0], [-3.0, 0.5, 0.25, 9.0]], &Device::Cpu).unwrap();
        let y = normalize(&x, LAYER_NORM_EPS).unwrap().to_vec2::<f64>().unwrap();
        for row in y {
            let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn sigmoid_saturates_exactly() {
        let x = Tensor::new(&[-800.0f64, 0.0, 800.0], &Device::Cpu).unwrap();
        assert_eq!(sigmoid(&x).unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let x = Tensor::new(&[[0.3f64, -1.0, 2.5]], &Device::Cpu).unwrap();
        let a = log_softmax_last(&x).unwrap().exp().unwrap().to_vec2::<f64>().unwrap();
        let b = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for (u, v) in a[0].iter().zip(&b[0]) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_shape_check() {
        let mut store = ParamStore::new(DType::F64, 0);
        let l = Linear::new(&mut store, "l", 3, 2, ParamGroup::Other).unwrap();
        let x = Tensor::zeros((2, 5, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(l.forward(&x).unwrap().dims(), &[2, 5, 2]);
        let bad = Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(l.forward(&bad).is_err());
    }
}

use candle_core::{DType, Device, Tensor};

use super::{softmax_last, Linear, ParamGroup, ParamStore};
use crate::error::{Error, Result};

/// Additive score for disallowed positions; `exp` of it underflows to zero.
pub const MASKED: f64 = -1e9;

/// Additive attention bias broadcastable to `(batch, heads, queries, keys)`.
/// Construction guarantees that every query row keeps at least one key.
#[derive(Debug, Clone)]
pub struct AttnMask {
    bias: Tensor,
}

impl AttnMask {
    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Wraps a bias already known to leave every row with an allowed key.
    pub(crate) fn from_bias(bias: Tensor) -> Self {
        Self { bias }
    }

    /// `allowed[b][k]`: key `k` of batch item `b` may be attended.
    pub fn from_key_valid(allowed: &[Vec<bool>], dtype: DType, device: &Device) -> Result<Self> {
        let batch = allowed.len();
        let keys = allowed.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(batch * keys);
        for (b, row) in allowed.iter().enumerate() {
            if row.len() != keys {
                return Err(Error::Shape("ragged key mask".into()));
            }
            if !row.iter().any(|&a| a) {
                return Err(Error::DegenerateAttention(format!("batch item {b} has every key masked")));
            }
            data.extend(row.iter().map(|&a| if a { 0.0 } else { MASKED }));
        }
        let bias = Tensor::from_vec(data, (batch, 1, 1, keys), device)?.to_dtype(dtype)?;
        Ok(Self { bias })
    }

    /// Keys at positions `>= lengths[b]` are padding.
    pub fn key_padding(lengths: &[usize], keys: usize, dtype: DType, device: &Device) -> Result<Self> {
        let allowed: Vec<Vec<bool>> = lengths.iter().map(|&n| (0..keys).map(|k| k < n).collect()).collect();
        Self::from_key_valid(&allowed, dtype, device)
    }

    /// Lower-triangular mask: query `t` sees keys `0..=t`.
    pub fn causal(len: usize, dtype: DType, device: &Device) -> Result<Self> {
        let data: Vec<f64> = (0..len)
            .flat_map(|q| (0..len).map(move |k| if k <= q { 0.0 } else { MASKED }))
            .collect();
        let bias = Tensor::from_vec(data, (1, 1, len, len), device)?.to_dtype(dtype)?;
        Ok(Self { bias })
    }

    /// General `(queries, keys)` mask shared across the batch.
    pub fn from_matrix(allowed: &[Vec<bool>], dtype: DType, device: &Device) -> Result<Self> {
        let queries = allowed.len();
        let keys = allowed.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(queries * keys);
        for (q, row) in allowed.iter().enumerate() {
            if row.len() != keys {
                return Err(Error::Shape("ragged attention mask".into()));
            }
            if !row.iter().any(|&a| a) {
                return Err(Error::DegenerateAttention(format!("query {q} has every key masked")));
            }
            data.extend(row.iter().map(|&a| if a { 0.0 } else { MASKED }));
        }
        let bias = Tensor::from_vec(data, (1, 1, queries, keys), device)?.to_dtype(dtype)?;
        Ok(Self { bias })
    }

    /// Both masks apply.
    pub fn and(&self, other: &AttnMask) -> Result<AttnMask> {
        Ok(AttnMask { bias: self.bias.broadcast_add(&other.bias)? })
    }
}

/// `softmax(q kᵀ / sqrt(d_head) + mask)` for head-split inputs
/// `(batch, heads, len, d_head)`.
pub fn attention_probs(q: &Tensor, k: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
    let d_head = *q.dims().last().ok_or_else(|| Error::Shape("scalar query".into()))?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? / (d_head as f64).sqrt())?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(m.bias())?,
        None => scores,
    };
    softmax_last(&scores)
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, d) = x.dims3()?;
    Ok(x.reshape((b, l, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, l, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, l, h * dh))?)
}

/// Multi-head scaled dot-product attention without projections. Inputs are
/// `(batch, len, width)`; returns the merged output and the per-head weights
/// `(batch, heads, queries, keys)`.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&AttnMask>,
) -> Result<(Tensor, Tensor)> {
    let (bq, _, dq) = q.dims3()?;
    let (bk, lk, dk) = k.dims3()?;
    let (bv, lv, dv) = v.dims3()?;
    if bq != bk || bk != bv {
        return Err(Error::Shape(format!("attention batch sizes differ: {bq}, {bk}, {bv}")));
    }
    if lk != lv {
        return Err(Error::Shape(format!("keys ({lk}) and values ({lv}) differ in length")));
    }
    if lk == 0 {
        return Err(Error::DegenerateAttention("no keys to attend".into()));
    }
    if dq != dk || dk != dv {
        return Err(Error::Shape(format!("attention widths differ: {dq}, {dk}, {dv}")));
    }
    if heads == 0 || dq % heads != 0 {
        return Err(Error::Shape(format!("width {dq} not divisible by {heads} heads")));
    }
    let (qh, kh, vh) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let probs = attention_probs(&qh, &kh, mask)?;
    let out = merge_heads(&probs.matmul(&vh)?)?;
    Ok((out, probs))
}

/// Projected multi-head attention: `o(attn(q(x), k(y), v(y)))`. Without an
/// output projection the merged heads are returned as is.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Option<Linear>,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
        }
        let mut lin = |part: &str| Linear::new(store, &format!("{name}.{part}"), d, d, ParamGroup::Other);
        Ok(Self { q: lin("q")?, k: lin("k")?, v: lin("v")?, o: Some(lin("o")?), heads })
    }

    pub fn without_output(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
        }
        let mut lin = |part: &str| Linear::new(store, &format!("{name}.{part}"), d, d, ParamGroup::Other);
        Ok(Self { q: lin("q")?, k: lin("k")?, v: lin("v")?, o: None, heads })
    }

    pub fn forward(&self, query: &Tensor, kv: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
        Ok(self.forward_with_probs(query, kv, mask)?.0)
    }

    pub fn forward_with_probs(&self, query: &Tensor, kv: &Tensor, mask: Option<&AttnMask>) -> Result<(Tensor, Tensor)> {
        let (out, probs) = scaled_dot_attention(
            &self.q.forward(query)?,
            &self.k.forward(kv)?,
            &self.v.forward(kv)?,
            self.heads,
            mask,
        )?;
        let out = match &self.o {
            Some(o) => o.forward(&out)?,
            None => out,
        };
        Ok((out, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_masked_row_is_rejected() {
        let dev = Device::Cpu;
        assert!(AttnMask::key_padding(&[2, 0], 3, DType::F64, &dev).is_err());
        assert!(AttnMask::from_matrix(&[vec![true, false], vec![false, false]], DType::F64, &dev).is_err());
    }

    #[test]
    fn key_padding_zeroes_padded_weights() {
        let dev = Device::Cpu;
        let q = Tensor::new(&[[[0.1f64, 0.2]]], &dev).unwrap();
        let k = Tensor::new(&[[[1.0f64, 0.0], [0.0, 1.0], [5.0, 5.0]]], &dev).unwrap();
        let mask = AttnMask::key_padding(&[2], 3, DType::F64, &dev).unwrap();
        let (_, p) = scaled_dot_attention(&q, &k, &k, 1, Some(&mask)).unwrap();
        let p = p.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(p[2], 0.0);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let dev = Device::Cpu;
        let q = Tensor::zeros((1, 2, 4), DType::F64, &dev).unwrap();
        let k = Tensor::zeros((1, 3, 4), DType::F64, &dev).unwrap();
        let v = Tensor::zeros((1, 2, 4), DType::F64, &dev).unwrap();
        assert!(scaled_dot_attention(&q, &k, &v, 1, None).is_err());
        assert!(scaled_dot_attention(&q, &k, &k, 3, None).is_err());
    }
}

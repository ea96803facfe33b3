//! Cross-attention fusion of the previous image and previous report into the
//! longitudinal representation.
//!
//! Image states query the report (`softmax(q(I) k(R)ᵀ / sqrt(d_head)) v(R)`)
//! and report states query the image; the two results are stacked as
//! `[image-side rows; report-side rows]`. There are no residual or
//! feed-forward sublayers here.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{AttnMask, MultiHeadAttention, ParamStore};
use crate::vision::{FeatureSeq, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Image queries attend over report keys/values.
    ImageToText,
    /// Report queries attend over image keys/values.
    TextToImage,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionFusion {
    pub image_to_text: MultiHeadAttention,
    pub text_to_image: MultiHeadAttention,
}

/// Longitudinal states `(batch, S + M, d)` and which key positions are real.
#[derive(Debug, Clone)]
pub struct Longitudinal {
    pub states: Tensor,
    pub key_valid: Vec<Vec<bool>>,
}

impl CrossAttentionFusion {
    pub fn new(store: &mut ParamStore, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            image_to_text: MultiHeadAttention::without_output(store, "fusion.image_to_text", d, heads)?,
            text_to_image: MultiHeadAttention::without_output(store, "fusion.text_to_image", d, heads)?,
        })
    }

    fn attn(&self, direction: Direction) -> &MultiHeadAttention {
        match direction {
            Direction::ImageToText => &self.image_to_text,
            Direction::TextToImage => &self.text_to_image,
        }
    }

    /// Batched cross-attention; output length equals the query length.
    pub fn cross_attend_batch(
        &self,
        query: &Tensor,
        kv: &Tensor,
        kv_mask: Option<&AttnMask>,
        direction: Direction,
    ) -> Result<(Tensor, Tensor)> {
        if kv.dims3()?.1 == 0 {
            return Err(Error::DegenerateAttention("cross-attention over an empty sequence".into()));
        }
        self.attn(direction).forward_with_probs(query, kv, kv_mask)
    }

    pub fn cross_attend(&self, query: &FeatureSeq, kv: &FeatureSeq, direction: Direction) -> Result<FeatureSeq> {
        if query.width() != kv.width() {
            return Err(Error::Shape(format!("widths differ: {} vs {}", query.width(), kv.width())));
        }
        let (out, _) = self.cross_attend_batch(&query.batched()?, &kv.batched()?, None, direction)?;
        FeatureSeq::from_batched(&out, query.role)
    }

    /// `h_img`: `(batch, S, d)`; `h_rep`: `(batch, M, d)` with per-item
    /// report lengths.
    pub fn fuse_batch(&self, h_img: &Tensor, h_rep: &Tensor, rep_lengths: &[usize]) -> Result<Longitudinal> {
        let (b, s, d_img) = h_img.dims3()?;
        let (b2, m, d_rep) = h_rep.dims3()?;
        if d_img != d_rep {
            return Err(Error::Shape(format!("image width {d_img} != report width {d_rep}")));
        }
        if b != b2 || rep_lengths.len() != b {
            return Err(Error::Shape("fusion batch sizes differ".into()));
        }
        let rep_mask = AttnMask::key_padding(rep_lengths, m, h_rep.dtype(), h_rep.device())?;
        let (img_star, _) = self.cross_attend_batch(h_img, h_rep, Some(&rep_mask), Direction::ImageToText)?;
        let (rep_star, _) = self.cross_attend_batch(h_rep, h_img, None, Direction::TextToImage)?;
        Ok(Longitudinal {
            states: Tensor::cat(&[&img_star, &rep_star], 1)?,
            key_valid: longitudinal_key_valid(s, m, rep_lengths),
        })
    }

    pub fn fuse_longitudinal(&self, h_img_prev: &FeatureSeq, h_rep_prev: &FeatureSeq) -> Result<FeatureSeq> {
        if h_img_prev.width() != h_rep_prev.width() {
            return Err(Error::Shape(format!(
                "widths differ: {} vs {}",
                h_img_prev.width(),
                h_rep_prev.width()
            )));
        }
        let out = self.fuse_batch(&h_img_prev.batched()?, &h_rep_prev.batched()?, &[h_rep_prev.len()])?;
        FeatureSeq::from_batched(&out.states, Role::Longitudinal)
    }
}

/// Plain concatenation `[H_img; H_rep]` (the ablation without cross-attention).
pub fn concat_longitudinal(h_img: &Tensor, h_rep: &Tensor, rep_lengths: &[usize]) -> Result<Longitudinal> {
    let (_, s, d_img) = h_img.dims3()?;
    let (_, m, d_rep) = h_rep.dims3()?;
    if d_img != d_rep {
        return Err(Error::Shape(format!("image width {d_img} != report width {d_rep}")));
    }
    Ok(Longitudinal {
        states: Tensor::cat(&[h_img, h_rep], 1)?,
        key_valid: longitudinal_key_valid(s, m, rep_lengths),
    })
}

fn longitudinal_key_valid(s: usize, m: usize, rep_lengths: &[usize]) -> Vec<Vec<bool>> {
    rep_lengths
        .iter()
        .map(|&n| (0..s + m).map(|k| k < s || k - s < n).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn fused_states_stack_both_directions() {
        let mut store = ParamStore::new(DType::F64, 1);
        let f = CrossAttentionFusion::new(&mut store, 4, 2).unwrap();
        let img = Tensor::randn(0.0, 1.0, (2, 3, 4), &Device::Cpu).unwrap();
        let rep = Tensor::randn(0.0, 1.0, (2, 5, 4), &Device::Cpu).unwrap();
        let out = f.fuse_batch(&img, &rep, &[5, 2]).unwrap();
        assert_eq!(out.states.dims(), &[2, 8, 4]);
        assert_eq!(out.key_valid[1], vec![true, true, true, true, true, false, false, false]);
        let (img_star, _) = f.cross_attend_batch(&img, &rep, Some(&AttnMask::key_padding(&[5, 2], 5, DType::F64, &Device::Cpu).unwrap()), Direction::ImageToText).unwrap();
        assert_eq!(flat(&out.states.narrow(1, 0, 3).unwrap()), flat(&img_star));
    }

    #[test]
    fn report_padding_does_not_reach_image_side() {
        let mut store = ParamStore::new(DType::F64, 2);
        let f = CrossAttentionFusion::new(&mut store, 4, 1).unwrap();
        let img = Tensor::randn(0.0, 1.0, (1, 2, 4), &Device::Cpu).unwrap();
        let rep = Tensor::randn(0.0, 1.0, (1, 3, 4), &Device::Cpu).unwrap();
        let noisy = Tensor::cat(&[rep.narrow(1, 0, 2).unwrap(), Tensor::ones((1, 1, 4), DType::F64, &Device::Cpu).unwrap()], 1).unwrap();
        let a = f.fuse_batch(&img, &rep, &[2]).unwrap().states.narrow(1, 0, 2).unwrap();
        let b = f.fuse_batch(&img, &noisy, &[2]).unwrap().states.narrow(1, 0, 2).unwrap();
        for (x, y) in flat(&a).iter().zip(flat(&b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_cross_attention_returns_its_value() {
        let mut store = ParamStore::new(DType::F64, 3);
        let f = CrossAttentionFusion::new(&mut store, 2, 1).unwrap();
        let q = FeatureSeq::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]], Role::ImagePrev, DType::F64).unwrap();
        let kv = FeatureSeq::from_rows(&[vec![0.7, -0.2]], Role::TextPrev, DType::F64).unwrap();
        let out = f.cross_attend(&q, &kv, Direction::ImageToText).unwrap();
        let v = f.image_to_text.v.forward(&kv.batched().unwrap()).unwrap();
        let v = flat(&v);
        for row in out.to_rows().unwrap() {
            assert!((row[0] - v[0]).abs() < 1e-12 && (row[1] - v[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_and_empty_keys_fail() {
        let mut store = ParamStore::new(DType::F64, 4);
        let f = CrossAttentionFusion::new(&mut store, 2, 1).unwrap();
        let img = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let empty = Tensor::zeros((1, 0, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            f.cross_attend_batch(&img, &empty, None, Direction::ImageToText),
            Err(Error::DegenerateAttention(_))
        ));
        let wide = Tensor::zeros((1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(concat_longitudinal(&img, &wide, &[2]).is_err());
    }
}

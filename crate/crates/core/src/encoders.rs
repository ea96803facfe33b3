//! Post-norm transformer encoders for image patches and the previous report.
//! Both image forwards share one parameter set; the text encoder has its own.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, AttnMask, FeedForward, LayerNorm, MultiHeadAttention, ParamGroup, ParamStore};
use crate::text::TokenSeq;
use crate::vision::{FeatureSeq, Role};

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d_ff)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
        let h = self.attn_norm.forward(&(x + self.attn.forward(x, x, mask)?)?)?;
        self.ffn_norm.forward(&(&h + self.ffn.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let layers = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), cfg.hidden, cfg.heads, cfg.ff_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, mask)?;
        }
        Ok(h)
    }
}

/// Encodes projected patch features `(batch, patches, hidden)`.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub stack: TransformerEncoder,
    pub positions: Option<Tensor>,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let positions = if cfg.image_positions {
            Some(store.uniform("image_encoder.positions", &[cfg.patches(), cfg.hidden], 0.02, ParamGroup::Other)?)
        } else {
            None
        };
        Ok(Self { stack: TransformerEncoder::new(store, "image_encoder", cfg)?, positions })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ensure_finite(x, "image encoder input")?;
        let x = match &self.positions {
            Some(pos) => {
                let len = x.dims3()?.1;
                if len > pos.dims()[0] {
                    return Err(Error::Shape(format!("{len} patches but {} learned positions", pos.dims()[0])));
                }
                x.broadcast_add(&pos.narrow(0, 0, len)?)?
            }
            None => x.clone(),
        };
        self.stack.forward(&x, None)
    }

    /// Single-image form; tags the result with `role`.
    pub fn encode(&self, f: &FeatureSeq, role: Role) -> Result<FeatureSeq> {
        FeatureSeq::from_batched(&self.forward(&f.batched()?)?, role)
    }
}

/// Token lookup table plus learned positions, then the encoder stack.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: Tensor,
    pub positions: Tensor,
    pub stack: TransformerEncoder,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        let std = 1.0 / (cfg.hidden as f64).sqrt();
        Ok(Self {
            embedding: store.uniform("text_encoder.embedding", &[vocab_size, cfg.hidden], std, ParamGroup::Other)?,
            positions: store.uniform("text_encoder.positions", &[cfg.max_report_len, cfg.hidden], std, ParamGroup::Other)?,
            stack: TransformerEncoder::new(store, "text_encoder", cfg)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.dims()[0]
    }

    /// `ids` is `(batch, len)` u32; positions past `lengths[b]` are padding
    /// and never attended to.
    pub fn forward(&self, ids: &Tensor, lengths: &[usize]) -> Result<(Tensor, AttnMask)> {
        let (b, len) = ids.dims2()?;
        if len > self.positions.dims()[0] {
            return Err(Error::Shape(format!(
                "report of {len} tokens exceeds {} positions",
                self.positions.dims()[0]
            )));
        }
        let d = self.embedding.dims()[1];
        let emb = self.embedding.index_select(&ids.flatten_all()?, 0)?.reshape((b, len, d))?;
        let x = emb.broadcast_add(&self.positions.narrow(0, 0, len)?)?;
        let mask = AttnMask::key_padding(lengths, len, self.embedding.dtype(), ids.device())?;
        Ok((self.stack.forward(&x, Some(&mask))?, mask))
    }

    /// Encodes one token sequence (its padded tail included) to `(len, hidden)`.
    pub fn encode(&self, tokens: &TokenSeq) -> Result<FeatureSeq> {
        let size = self.vocab_size();
        if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= size) {
            return Err(Error::TokenOutOfRange { id, size });
        }
        if tokens.len == 0 {
            return Err(Error::InvalidInput("cannot encode an empty report".into()));
        }
        let ids = Tensor::from_slice(&tokens.ids, (1, tokens.ids.len()), self.embedding.device())?;
        let (h, _) = self.forward(&ids, &[tokens.len])?;
        FeatureSeq::from_batched(&h, Role::TextPrev)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, IndexOp};

    fn cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            hidden: 8,
            heads: 2,
            encoder_layers: 2,
            ff_dim: 16,
            max_report_len: 6,
            ..ModelConfig::default()
        }
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn padded_tokens_do_not_leak_into_real_positions() {
        let mut store = ParamStore::new(DType::F64, 1);
        let enc = TextEncoder::new(&mut store, &cfg(), 10).unwrap();
        let a = Tensor::from_slice(&[4u32, 5, 6, 0, 0], (1, 5), &Device::Cpu).unwrap();
        let b = Tensor::from_slice(&[4u32, 5, 6, 9, 7], (1, 5), &Device::Cpu).unwrap();
        let (ha, _) = enc.forward(&a, &[3]).unwrap();
        let (hb, _) = enc.forward(&b, &[3]).unwrap();
        let (ra, rb) = (flat(&ha.i((.., 0..3, ..)).unwrap()), flat(&hb.i((.., 0..3, ..)).unwrap()));
        for (x, y) in ra.iter().zip(&rb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn image_encoder_is_permutation_equivariant() {
        let mut store = ParamStore::new(DType::F64, 2);
        let enc = ImageEncoder::new(&mut store, &cfg()).unwrap();
        let x = Tensor::randn(0.0, 1.0, (1, 4, 8), &Device::Cpu).unwrap();
        let perm = Tensor::from_slice(&[2u32, 0, 3, 1], 4, &Device::Cpu).unwrap();
        let a = enc.forward(&x).unwrap().index_select(&perm, 1).unwrap();
        let b = enc.forward(&x.index_select(&perm, 1).unwrap()).unwrap();
        for (p, q) in flat(&a).iter().zip(flat(&b)) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn encode_checks_token_range_and_length() {
        let mut store = ParamStore::new(DType::F64, 3);
        let enc = TextEncoder::new(&mut store, &cfg(), 10).unwrap();
        assert!(matches!(enc.encode(&TokenSeq::new(vec![4, 10])), Err(Error::TokenOutOfRange { id: 10, size: 10 })));
        assert!(enc.encode(&TokenSeq::new(vec![4; 7])).is_err());
        assert_eq!(enc.encode(&TokenSeq::new(vec![4, 5])).unwrap().len(), 2);
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let mut store = ParamStore::new(DType::F64, 4);
        let enc = ImageEncoder::new(&mut store, &cfg()).unwrap();
        let x = Tensor::from_vec(vec![f64::NAN; 8], (1, 1, 8), &Device::Cpu).unwrap();
        assert!(matches!(enc.forward(&x), Err(Error::NonFinite(_))));
    }
}

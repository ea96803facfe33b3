//! Hierarchical decoder with relational memory.
//!
//! Per decoding step `t` the memory `M_t` (slots × d) is updated from the
//! embedding of the step's input token, then aligned with the current-image
//! states to give `M^IC_t`. Every block runs two sub-blocks: sub-block-1
//! attends over the current image, its output is blended with the block
//! input by `(1 - β)·h_in + β·h_I`, sub-block-2 attends over the
//! longitudinal states, and the block emits `layer_norm(h_I + h_L)`. All
//! normalizations inside the sub-blocks are memory-conditional, driven by
//! the flattened `M^IC_t`.

use candle_core::{DType, Device, Tensor, D};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{
    normalize, sigmoid, AttnMask, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamGroup, ParamStore,
    LAYER_NORM_EPS,
};

/// Relational memory matrix and, once aligned, its image-aligned variant.
/// Both are `(batch, slots, d)`.
#[derive(Debug, Clone)]
pub struct MemoryState {
    pub memory: Tensor,
    pub aligned: Option<Tensor>,
}

impl MemoryState {
    pub fn new(memory: Tensor) -> Self {
        Self { memory, aligned: None }
    }

    pub fn slots(&self) -> usize {
        self.memory.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.memory.dims()[2]
    }
}

/// Gated attention memory: the memory attends over itself plus the new
/// token, a feed-forward transform yields the candidate, and input/forget
/// gates blend candidate and previous memory.
#[derive(Debug, Clone)]
pub struct RelationalMemory {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    /// Token → [input gate | forget gate] pre-activations.
    pub gate_token: Linear,
    /// tanh(memory) → [input gate | forget gate] pre-activations.
    pub gate_memory: Linear,
    pub slots: usize,
    pub width: usize,
}

impl RelationalMemory {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.hidden;
        Ok(Self {
            attn: MultiHeadAttention::new(store, "memory.attn", d, cfg.memory_heads)?,
            ffn: FeedForward::new(store, "memory.ffn", d, d)?,
            gate_token: Linear::new(store, "memory.gate_token", d, 2 * d, ParamGroup::Other)?,
            gate_memory: Linear::new(store, "memory.gate_memory", d, 2 * d, ParamGroup::Other)?,
            slots: cfg.memory_slots,
            width: d,
        })
    }

    /// Identity rows padded with zeros: slot `i` starts as the unit vector `e_i`.
    pub fn initial(&self, batch: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut data = vec![0f64; self.slots * self.width];
        for i in 0..self.slots.min(self.width) {
            data[i * self.width + i] = 1.0;
        }
        let one = Tensor::from_vec(data, (1, self.slots, self.width), device)?.to_dtype(dtype)?;
        Ok(one.broadcast_as((batch, self.slots, self.width))?.contiguous()?)
    }

    /// One step: `memory` is `(batch, slots, d)`, `token` is `(batch, d)`.
    pub fn update(&self, memory: &Tensor, token: &Tensor) -> Result<Tensor> {
        let (b, slots, d) = memory.dims3()?;
        let (bt, dt) = token.dims2()?;
        if bt != b || dt != d {
            return Err(Error::Shape(format!(
                "memory ({b}, {slots}, {d}) cannot take a token of shape ({bt}, {dt})"
            )));
        }
        let token = token.unsqueeze(1)?;
        let kv = Tensor::cat(&[memory, &token], 1)?;
        let attended = (memory + self.attn.forward(memory, &kv, None)?)?;
        let candidate = (&attended + self.ffn.forward(&attended)?)?.tanh()?;
        let gates = self
            .gate_memory
            .forward(&memory.tanh()?)?
            .broadcast_add(&self.gate_token.forward(&token)?)?;
        let input_gate = sigmoid(&gates.narrow(D::Minus1, 0, d)?)?;
        let forget_gate = sigmoid(&gates.narrow(D::Minus1, d, d)?)?;
        Ok(((forget_gate * memory)? + (input_gate * candidate)?)?)
    }

    pub fn update_state(&self, state: &MemoryState, token: &Tensor) -> Result<MemoryState> {
        Ok(MemoryState::new(self.update(&state.memory, token)?))
    }

    /// Runs the recurrence over `(batch, T, d)` token embeddings and returns
    /// the memory after each step, `(batch, T, slots, d)`.
    pub fn sequence(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, t, _) = tokens.dims3()?;
        let mut memory = self.initial(b, tokens.dtype(), tokens.device())?;
        let mut steps = Vec::with_capacity(t);
        for i in 0..t {
            memory = self.update(&memory, &tokens.narrow(1, i, 1)?.squeeze(1)?)?;
            steps.push(memory.unsqueeze(1)?);
        }
        Ok(Tensor::cat(&steps, 1)?)
    }
}

/// `aligned = M + attn(query = M, keys/values = H_IC)`. No output projection.
#[derive(Debug, Clone)]
pub struct MemoryAligner {
    pub attn: MultiHeadAttention,
}

impl MemoryAligner {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { attn: MultiHeadAttention::without_output(store, "memory.align", cfg.hidden, cfg.memory_heads)? })
    }

    /// `memory` may be `(batch, slots, d)` or `(batch, T, slots, d)`; every
    /// memory row is an independent query over `h_img` `(batch, S, d)`.
    pub fn align(&self, memory: &Tensor, h_img: &Tensor) -> Result<Tensor> {
        let dims = memory.dims().to_vec();
        let (b, s, d) = h_img.dims3()?;
        if s == 0 {
            return Err(Error::DegenerateAttention("cannot align memory with an empty image".into()));
        }
        if dims[0] != b || *dims.last().unwrap_or(&0) != d {
            return Err(Error::Shape(format!("memory {dims:?} incompatible with image states ({b}, {s}, {d})")));
        }
        let rows: usize = dims[1..dims.len() - 1].iter().product();
        let queries = memory.reshape((b, rows, d))?;
        let attended = self.attn.forward(&queries, h_img, None)?;
        Ok((memory + attended.reshape(dims)?)?)
    }

    pub fn align_state(&self, state: &MemoryState, h_img: &Tensor) -> Result<MemoryState> {
        Ok(MemoryState { memory: state.memory.clone(), aligned: Some(self.align(&state.memory, h_img)?) })
    }
}

/// Memory-conditional layer normalization:
/// `(γ + Δγ(m)) ⊙ x̂ + (β + Δβ(m))`, `m` the flattened aligned memory.
#[derive(Debug, Clone)]
pub struct Mcln {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub delta_gamma: Linear,
    pub delta_beta: Linear,
    pub eps: f64,
}

impl Mcln {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, memory_len: usize) -> Result<Self> {
        let std = 0.1 / (memory_len as f64).sqrt();
        let mut delta = |part: &str| -> Result<Linear> {
            let w = store.uniform(&format!("{name}.{part}.weight"), &[memory_len, d], std, ParamGroup::Other)?;
            let b = store.zeros(&format!("{name}.{part}.bias"), &[d], ParamGroup::Other)?;
            Ok(Linear::from_tensors(w, Some(b)))
        };
        Ok(Self {
            delta_gamma: delta("delta_gamma")?,
            delta_beta: delta("delta_beta")?,
            gamma: store.ones(&format!("{name}.gamma"), &[d], ParamGroup::Other)?,
            beta: store.zeros(&format!("{name}.beta"), &[d], ParamGroup::Other)?,
            eps: LAYER_NORM_EPS,
        })
    }

    /// `x`: `(batch, T, d)`; `memory`: flattened aligned memory per position
    /// `(batch, T, slots·d)`. Without memory this is plain layer normalization.
    pub fn forward(&self, x: &Tensor, memory: Option<&Tensor>) -> Result<Tensor> {
        let xhat = normalize(x, self.eps)?;
        match memory {
            None => Ok(xhat.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?),
            Some(m) => {
                let gain = self.delta_gamma.forward(m)?.broadcast_add(&self.gamma)?;
                let bias = self.delta_beta.forward(m)?.broadcast_add(&self.beta)?;
                Ok(((xhat * gain)? + bias)?)
            }
        }
    }
}

/// Self-attention, encoder-decoder attention and feed-forward, each as a
/// pre-normalized residual sublayer with memory-conditional normalization.
#[derive(Debug, Clone)]
pub struct SubBlock {
    pub self_attn: MultiHeadAttention,
    pub context_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norms: [Mcln; 3],
}

impl SubBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let (d, mlen) = (cfg.hidden, cfg.memory_slots * cfg.hidden);
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.heads)?,
            context_attn: MultiHeadAttention::new(store, &format!("{name}.context_attn"), d, cfg.heads)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ff_dim)?,
            norms: [
                Mcln::new(store, &format!("{name}.norm0"), d, mlen)?,
                Mcln::new(store, &format!("{name}.norm1"), d, mlen)?,
                Mcln::new(store, &format!("{name}.norm2"), d, mlen)?,
            ],
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        context: &Tensor,
        context_mask: Option<&AttnMask>,
        memory: Option<&Tensor>,
        causal: &AttnMask,
    ) -> Result<Tensor> {
        let n = self.norms[0].forward(x, memory)?;
        let h = (x + self.self_attn.forward(&n, &n, Some(causal))?)?;
        let n = self.norms[1].forward(&h, memory)?;
        let h = (&h + self.context_attn.forward(&n, context, context_mask)?)?;
        let n = self.norms[2].forward(&h, memory)?;
        Ok((&h + self.ffn.forward(&n)?)?)
    }
}

/// `(1 - β)·h_in + β·h_sub`.
pub fn blend(h_in: &Tensor, h_sub: &Tensor, beta: f64) -> Result<Tensor> {
    Ok((h_in.affine(1.0 - beta, 0.0)? + h_sub.affine(beta, 0.0)?)?)
}

/// Encoder-side states the decoder attends over.
#[derive(Debug, Clone)]
pub struct DecoderContext {
    /// Current image states `(batch, S, d)`.
    pub image: Tensor,
    /// Longitudinal states `(batch, L, d)` and their key mask.
    pub longitudinal: Option<(Tensor, AttnMask)>,
}

impl DecoderContext {
    /// Repeats batch item `index[i]` into row `i`.
    pub fn select(&self, index: &[u32]) -> Result<Self> {
        let idx = Tensor::from_slice(index, index.len(), self.image.device())?;
        let image = self.image.index_select(&idx, 0)?;
        let longitudinal = match &self.longitudinal {
            Some((states, mask)) => {
                let bias = mask.bias();
                let selected = if bias.dims()[0] == 1 { bias.clone() } else { bias.index_select(&idx, 0)? };
                Some((states.index_select(&idx, 0)?, AttnMask::from_bias(selected)))
            }
            None => None,
        };
        Ok(Self { image, longitudinal })
    }
}

/// Intermediate values of one decoder block.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub image_branch: Tensor,
    pub blended: Tensor,
    pub longitudinal_branch: Option<Tensor>,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub image_sub: SubBlock,
    pub longitudinal_sub: Option<SubBlock>,
    pub out_norm: LayerNorm,
    pub beta: f64,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, longitudinal: bool) -> Result<Self> {
        Ok(Self {
            image_sub: SubBlock::new(store, &format!("{name}.image_sub"), cfg)?,
            longitudinal_sub: if longitudinal {
                Some(SubBlock::new(store, &format!("{name}.longitudinal_sub"), cfg)?)
            } else {
                None
            },
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), cfg.hidden)?,
            beta: cfg.beta,
        })
    }

    pub fn forward(
        &self,
        h_in: &Tensor,
        ctx: &DecoderContext,
        memory: Option<&Tensor>,
        causal: &AttnMask,
    ) -> Result<BlockOutput> {
        let image_branch = self.image_sub.forward(h_in, &ctx.image, None, memory, causal)?;
        let blended = blend(h_in, &image_branch, self.beta)?;
        let longitudinal_branch = match (&self.longitudinal_sub, &ctx.longitudinal) {
            (Some(sub), Some((states, mask))) => Some(sub.forward(&blended, states, Some(mask), memory, causal)?),
            (None, None) => None,
            (Some(_), None) => return Err(Error::InvalidInput("decoder block expects longitudinal states".into())),
            (None, Some(_)) => return Err(Error::InvalidInput("decoder block has no longitudinal sub-block".into())),
        };
        let summed = match &longitudinal_branch {
            Some(l) => (&image_branch + l)?,
            None => image_branch.clone(),
        };
        let output = self.out_norm.forward(&summed)?;
        Ok(BlockOutput { image_branch, blended, longitudinal_branch, output })
    }
}

/// Token embedding + learned positions → N blocks → vocabulary logits.
#[derive(Debug, Clone)]
pub struct HierarchicalDecoder {
    pub embedding: Tensor,
    pub positions: Tensor,
    pub memory: Option<(RelationalMemory, MemoryAligner)>,
    pub blocks: Vec<DecoderBlock>,
    pub output: Linear,
}

impl HierarchicalDecoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        vocab_size: usize,
        use_memory: bool,
        longitudinal: bool,
    ) -> Result<Self> {
        let std = 1.0 / (cfg.hidden as f64).sqrt();
        let embedding = store.uniform("decoder.embedding", &[vocab_size, cfg.hidden], std, ParamGroup::Other)?;
        let positions = store.uniform("decoder.positions", &[cfg.max_target_len, cfg.hidden], std, ParamGroup::Other)?;
        let memory = if use_memory {
            Some((RelationalMemory::new(store, cfg)?, MemoryAligner::new(store, cfg)?))
        } else {
            None
        };
        let blocks = (0..cfg.decoder_layers)
            .map(|i| DecoderBlock::new(store, &format!("decoder.block{i}"), cfg, longitudinal))
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::new(store, "decoder.output", cfg.hidden, vocab_size, ParamGroup::Other)?;
        Ok(Self { embedding, positions, memory, blocks, output })
    }

    pub fn max_len(&self) -> usize {
        self.positions.dims()[0]
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.dims()[0]
    }

    pub fn embed_tokens(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let d = self.embedding.dims()[1];
        Ok(self.embedding.index_select(&ids.flatten_all()?, 0)?.reshape((b, t, d))?)
    }

    /// Memory after each input token, `(batch, T, slots, d)`.
    pub fn memory_states(&self, ids: &Tensor) -> Result<Option<Tensor>> {
        match &self.memory {
            Some((rm, _)) => Ok(Some(rm.sequence(&self.embed_tokens(ids)?)?)),
            None => Ok(None),
        }
    }

    /// Teacher-forced logits `(batch, T, vocab)` for input ids `(batch, T)`.
    pub fn forward(&self, ids: &Tensor, ctx: &DecoderContext) -> Result<Tensor> {
        let memory = self.memory_states(ids)?;
        self.forward_with_memory(ids, memory.as_ref(), ctx)
    }

    /// Like [`forward`](Self::forward) with precomputed per-step memory.
    pub fn forward_with_memory(&self, ids: &Tensor, memory: Option<&Tensor>, ctx: &DecoderContext) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        if t > self.max_len() {
            return Err(Error::InvalidInput(format!("target of {t} tokens exceeds maximum {}", self.max_len())));
        }
        let emb = self.embed_tokens(ids)?;
        let mut h = emb.broadcast_add(&self.positions.narrow(0, 0, t)?)?;
        let aligned = match (&self.memory, memory) {
            (Some((_, aligner)), Some(m)) => {
                let (_, _, slots, d) = m.dims4()?;
                Some(aligner.align(m, &ctx.image)?.reshape((b, t, slots * d))?)
            }
            (None, None) => None,
            _ => return Err(Error::InvalidInput("memory states do not match the decoder configuration".into())),
        };
        let causal = AttnMask::causal(t, h.dtype(), h.device())?;
        for block in &self.blocks {
            h = block.forward(&h, ctx, aligned.as_ref(), &causal)?.output;
        }
        self.output.forward(&h)
    }
}

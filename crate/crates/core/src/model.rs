//! Full model: feature projection, image/text encoders, longitudinal fusion
//! (per variant) and the hierarchical decoder, plus decoding and
//! checkpoint I/O.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::encoders::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{concat_longitudinal, CrossAttentionFusion, Longitudinal};
use crate::memory_decoder::{DecoderContext, HierarchicalDecoder};
use crate::nn::{log_softmax_last, read_checkpoint, write_checkpoint, AttnMask, ParamStore};
use crate::text::{TokenSeq, BOS, EOS, PAD};
use crate::vision::FeatureProjection;

/// Batched model inputs. Previous-visit fields may be absent when the
/// variant does not read them.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    /// Current-image backbone features `(batch, S, feature_dim)`.
    pub current_image: Tensor,
    pub previous_image: Option<Tensor>,
    /// Previous-report ids `(batch, M)` and unpadded lengths.
    pub previous_report: Option<(Tensor, Vec<usize>)>,
}

impl ModelInputs {
    pub fn batch_size(&self) -> usize {
        self.current_image.dims()[0]
    }
}

/// Which inputs and paths one forward pass touched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputTrace {
    pub current_image: bool,
    pub previous_image: bool,
    pub previous_report: bool,
    pub cross_attention: bool,
    pub memory: bool,
}

impl InputTrace {
    /// The trace a variant is declared to produce.
    pub fn declared(variant: Variant) -> Self {
        Self {
            current_image: true,
            previous_image: variant.uses_prev_image(),
            previous_report: variant.uses_prev_report(),
            cross_attention: variant.uses_cross_attention(),
            memory: variant.uses_memory(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    variant: Variant,
    vocab_size: usize,
}

#[derive(Debug)]
pub struct LongitudinalModel {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub store: ParamStore,
    pub projection: FeatureProjection,
    pub image_encoder: ImageEncoder,
    pub text_encoder: Option<TextEncoder>,
    pub fusion: Option<CrossAttentionFusion>,
    pub decoder: HierarchicalDecoder,
}

impl LongitudinalModel {
    /// Builds a freshly initialized model. Parameters are created in a fixed
    /// order from `seed`, so equal seeds give equal weights.
    pub fn new(cfg: &ModelConfig, variant: Variant, vocab_size: usize, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab_size <= EOS as usize {
            return Err(Error::InvalidInput(format!("vocabulary of {vocab_size} tokens is too small")));
        }
        let mut store = ParamStore::new(dtype, seed);
        let projection = FeatureProjection::new(&mut store, cfg.feature_dim, cfg.hidden)?;
        let image_encoder = ImageEncoder::new(&mut store, cfg)?;
        let text_encoder = if variant.uses_prev_report() {
            Some(TextEncoder::new(&mut store, cfg, vocab_size)?)
        } else {
            None
        };
        let fusion = if variant.uses_cross_attention() {
            Some(CrossAttentionFusion::new(&mut store, cfg.hidden, cfg.heads)?)
        } else {
            None
        };
        let decoder = HierarchicalDecoder::new(
            &mut store,
            cfg,
            vocab_size,
            variant.uses_memory(),
            variant.has_longitudinal_context(),
        )?;
        Ok(Self { cfg: cfg.clone(), variant, store, projection, image_encoder, text_encoder, fusion, decoder })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.vocab_size()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn encode_image(&self, features: &Tensor) -> Result<Tensor> {
        let (_, s, f) = features.dims3()?;
        if f != self.cfg.feature_dim {
            return Err(Error::Shape(format!("expected {}-wide features, got {f}", self.cfg.feature_dim)));
        }
        if s == 0 {
            return Err(Error::DegenerateAttention("image with no patches".into()));
        }
        let projected = self.projection.forward(&features.to_dtype(self.dtype())?)?;
        self.image_encoder.forward(&projected)
    }

    /// Runs the encoders and the variant's longitudinal path.
    pub fn encode(&self, inputs: &ModelInputs) -> Result<(DecoderContext, InputTrace)> {
        let mut trace = InputTrace { current_image: true, memory: self.variant.uses_memory(), ..Default::default() };
        let b = inputs.batch_size();
        let image = self.encode_image(&inputs.current_image)?;

        let prev_image = if self.variant.uses_prev_image() {
            let feats = inputs
                .previous_image
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("variant {} needs the previous image", self.variant)))?;
            trace.previous_image = true;
            Some(self.encode_image(feats)?)
        } else {
            None
        };
        let prev_report = match &self.text_encoder {
            Some(enc) => {
                let (ids, lengths) = inputs
                    .previous_report
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput(format!("variant {} needs the previous report", self.variant)))?;
                check_ids(ids, enc.vocab_size())?;
                if lengths.len() != b {
                    return Err(Error::Shape(format!("{} report lengths for a batch of {b}", lengths.len())));
                }
                trace.previous_report = true;
                let (h, mask) = enc.forward(ids, lengths)?;
                Some((h, mask, lengths.clone()))
            }
            None => None,
        };

        let longitudinal = match (self.variant, prev_image, prev_report) {
            (Variant::Baseline, _, _) => None,
            (Variant::PlusImage, Some(h), _) => {
                let s = h.dims3()?.1;
                let mask = AttnMask::from_key_valid(&vec![vec![true; s]; b], self.dtype(), self.device())?;
                Some((h, mask))
            }
            (Variant::PlusReport, _, Some((h, mask, _))) => Some((h, mask)),
            (Variant::SimpleFusion, Some(hi), Some((hr, _, lengths))) => {
                Some(self.longitudinal_states(concat_longitudinal(&hi, &hr, &lengths)?)?)
            }
            (Variant::Full, Some(hi), Some((hr, _, lengths))) => {
                let fusion = self.fusion.as_ref().ok_or_else(|| Error::InvalidInput("fusion missing".into()))?;
                trace.cross_attention = true;
                Some(self.longitudinal_states(fusion.fuse_batch(&hi, &hr, &lengths)?)?)
            }
            _ => return Err(Error::InvalidInput("inconsistent variant wiring".into())),
        };
        Ok((DecoderContext { image, longitudinal }, trace))
    }

    fn longitudinal_states(&self, l: Longitudinal) -> Result<(Tensor, AttnMask)> {
        let mask = AttnMask::from_key_valid(&l.key_valid, self.dtype(), self.device())?;
        Ok((l.states, mask))
    }

    /// Teacher-forced logits `(batch, T, vocab)` for decoder input ids `(batch, T)`.
    pub fn forward(&self, inputs: &ModelInputs, decoder_ids: &Tensor) -> Result<(Tensor, InputTrace)> {
        check_ids(decoder_ids, self.vocab_size())?;
        let (ctx, trace) = self.encode(inputs)?;
        Ok((self.decoder.forward(decoder_ids, &ctx)?, trace))
    }

    /// Decodes every batch item from BOS. `max_len` bounds the generated
    /// token count (EOS included) and is capped by the decoder's positions.
    /// Returned sequences exclude BOS and EOS.
    pub fn generate(&self, inputs: &ModelInputs, mode: DecodeMode, max_len: usize) -> Result<Vec<TokenSeq>> {
        if max_len < 1 {
            return Err(Error::InvalidInput("max_len must be at least 1".into()));
        }
        let steps = max_len.min(self.decoder.max_len());
        let (ctx, _) = self.encode(inputs)?;
        match mode {
            DecodeMode::Greedy => self.greedy(&ctx, inputs.batch_size(), steps),
            DecodeMode::Beam(k) => {
                if k == 0 {
                    return Err(Error::InvalidInput("beam width must be at least 1".into()));
                }
                (0..inputs.batch_size())
                    .map(|i| self.beam(&ctx.select(&[i as u32])?, k, steps))
                    .collect()
            }
        }
    }

    fn greedy(&self, ctx: &DecoderContext, batch: usize, steps: usize) -> Result<Vec<TokenSeq>> {
        let mut state = DecodeState::start(self, batch)?;
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); batch];
        let mut done = vec![false; batch];
        for _ in 0..steps {
            let logp = state.next_log_probs(self, ctx)?;
            let mut next = Vec::with_capacity(batch);
            for (i, row) in logp.iter().enumerate() {
                let tok = if done[i] { PAD } else { argmax(row) };
                if !done[i] {
                    if tok == EOS {
                        done[i] = true;
                    } else {
                        out[i].push(tok);
                    }
                }
                next.push(tok);
            }
            if done.iter().all(|&d| d) {
                break;
            }
            state.push(self, &next)?;
        }
        Ok(out.into_iter().map(TokenSeq::new).collect())
    }

    fn beam(&self, ctx: &DecoderContext, k: usize, steps: usize) -> Result<TokenSeq> {
        struct Hyp {
            tokens: Vec<u32>,
            score: f64,
        }
        let mut live = vec![Hyp { tokens: Vec::new(), score: 0.0 }];
        let mut state = DecodeState::start(self, 1)?;
        let mut finished: Vec<Hyp> = Vec::new();
        for step in 0..steps {
            let beam_ctx = ctx.select(&vec![0u32; live.len()])?;
            let logp = state.next_log_probs(self, &beam_ctx)?;
            // (score, token, beam)
            let mut cands: Vec<(f64, u32, usize)> = Vec::new();
            for (bi, row) in logp.iter().enumerate() {
                for (tok, &lp) in row.iter().enumerate() {
                    cands.push((live[bi].score + lp, tok as u32, bi));
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            });
            let mut next_live = Vec::new();
            let mut parents = Vec::new();
            let mut next_tokens = Vec::new();
            for (score, tok, bi) in cands {
                if next_live.len() + finished.len() >= k {
                    break;
                }
                let mut tokens = live[bi].tokens.clone();
                tokens.push(tok);
                if tok == EOS || step + 1 == steps {
                    finished.push(Hyp { tokens, score });
                } else {
                    next_live.push(Hyp { tokens, score });
                    parents.push(bi as u32);
                    next_tokens.push(tok);
                }
            }
            if finished.len() >= k || next_live.is_empty() {
                break;
            }
            state.reorder(&parents)?;
            state.push(self, &next_tokens)?;
            live = next_live;
        }
        let best = finished
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                let na = a.score / a.tokens.len() as f64;
                let nb = b.score / b.tokens.len() as f64;
                na.partial_cmp(&nb).unwrap_or(Ordering::Equal).then(ib.cmp(ia))
            })
            .map(|(_, h)| h.tokens.clone())
            .unwrap_or_default();
        Ok(TokenSeq::new(best.into_iter().filter(|&t| t != EOS).collect()))
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let meta = CheckpointMeta { model: self.cfg.clone(), variant: self.variant, vocab_size: self.vocab_size() };
        write_checkpoint(&self.store, serde_json::to_value(meta)?, w)
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(r: R, dtype: DType) -> Result<Self> {
        let (manifest, tensors) = read_checkpoint(r)?;
        let meta: CheckpointMeta = serde_json::from_value(manifest.metadata)
            .map_err(|e| Error::Checkpoint(format!("bad model metadata: {e}")))?;
        let model = Self::new(&meta.model, meta.variant, meta.vocab_size, dtype, 0)?;
        model.store.load_tensors(&tensors)?;
        Ok(model)
    }

    pub fn load_path(path: &Path, dtype: DType) -> Result<Self> {
        Self::load(BufReader::new(File::open(path)?), dtype)
    }
}

/// Decoder prefix plus the memory after each prefix token.
struct DecodeState {
    ids: Vec<Vec<u32>>,
    memory_steps: Option<Tensor>,
    memory_last: Option<Tensor>,
}

impl DecodeState {
    fn start(model: &LongitudinalModel, batch: usize) -> Result<Self> {
        let mut state = Self { ids: vec![Vec::new(); batch], memory_steps: None, memory_last: None };
        if let Some((rm, _)) = &model.decoder.memory {
            state.memory_last = Some(rm.initial(batch, model.dtype(), model.device())?);
        }
        state.push(model, &vec![BOS; batch])?;
        Ok(state)
    }

    fn push(&mut self, model: &LongitudinalModel, tokens: &[u32]) -> Result<()> {
        for (row, &t) in self.ids.iter_mut().zip(tokens) {
            row.push(t);
        }
        if let (Some((rm, _)), Some(last)) = (&model.decoder.memory, &self.memory_last) {
            let ids = Tensor::from_slice(tokens, (tokens.len(), 1), model.device())?;
            let emb = model.decoder.embed_tokens(&ids)?.squeeze(1)?;
            let next = rm.update(last, &emb)?;
            let step = next.unsqueeze(1)?;
            self.memory_steps = Some(match &self.memory_steps {
                Some(prev) => Tensor::cat(&[prev, &step], 1)?,
                None => step,
            });
            self.memory_last = Some(next);
        }
        Ok(())
    }

    fn reorder(&mut self, parents: &[u32]) -> Result<()> {
        self.ids = parents.iter().map(|&p| self.ids[p as usize].clone()).collect();
        let idx = Tensor::from_slice(parents, parents.len(), &Device::Cpu)?;
        if let Some(m) = &self.memory_steps {
            self.memory_steps = Some(m.index_select(&idx, 0)?);
        }
        if let Some(m) = &self.memory_last {
            self.memory_last = Some(m.index_select(&idx, 0)?);
        }
        Ok(())
    }

    /// Log-probabilities of the next token per row, as f64.
    fn next_log_probs(&self, model: &LongitudinalModel, ctx: &DecoderContext) -> Result<Vec<Vec<f64>>> {
        let b = self.ids.len();
        let t = self.ids[0].len();
        let flat: Vec<u32> = self.ids.iter().flatten().copied().collect();
        let ids = Tensor::from_vec(flat, (b, t), model.device())?;
        let logits = model.decoder.forward_with_memory(&ids, self.memory_steps.as_ref(), ctx)?;
        let last = logits.i((.., t - 1, ..))?;
        let logp = log_softmax_last(&last.to_dtype(DType::F64)?)?;
        Ok(logp.to_vec2::<f64>()?)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn check_ids(ids: &Tensor, size: usize) -> Result<()> {
    let max = ids.flatten_all()?.max(D::Minus1)?.to_dtype(DType::U32)?.to_scalar::<u32>();
    match max {
        Ok(id) if id as usize >= size => Err(Error::TokenOutOfRange { id, size }),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 6,
            hidden: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            ff_dim: 16,
            memory_slots: 2,
            memory_heads: 2,
            max_target_len: 10,
            max_report_len: 6,
            image_size: 64,
            ..ModelConfig::default()
        }
    }

    fn inputs(batch: usize) -> ModelInputs {
        let dev = Device::Cpu;
        let feats = |seed: f64| {
            let v: Vec<f64> = (0..batch * 4 * 6).map(|i| ((i as f64 + seed) * 0.37).sin()).collect();
            Tensor::from_vec(v, (batch, 4, 6), &dev).unwrap()
        };
        let ids: Vec<u32> = (0..batch * 5).map(|i| 4 + (i as u32 % 7)).collect();
        ModelInputs {
            current_image: feats(0.0),
            previous_image: Some(feats(1.0)),
            previous_report: Some((Tensor::from_vec(ids, (batch, 5), &dev).unwrap(), vec![5; batch])),
        }
    }

    #[test]
    fn each_variant_reads_its_declared_inputs() {
        for v in [Variant::Baseline, Variant::PlusImage, Variant::PlusReport, Variant::SimpleFusion, Variant::Full] {
            let m = LongitudinalModel::new(&cfg(), v, 12, DType::F64, 1).unwrap();
            let (_, trace) = m.encode(&inputs(2)).unwrap();
            assert_eq!(trace, InputTrace::declared(v), "{v}");
        }
    }

    #[test]
    fn baseline_runs_without_previous_visit() {
        let m = LongitudinalModel::new(&cfg(), Variant::Baseline, 12, DType::F64, 1).unwrap();
        let mut x = inputs(1);
        x.previous_image = None;
        x.previous_report = None;
        let ids = Tensor::from_slice(&[BOS, 5, 6], (1, 3), &Device::Cpu).unwrap();
        assert_eq!(m.forward(&x, &ids).unwrap().0.dims(), &[1, 3, 12]);

        let full = LongitudinalModel::new(&cfg(), Variant::Full, 12, DType::F64, 1).unwrap();
        assert!(matches!(full.forward(&x, &ids), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = LongitudinalModel::new(&cfg(), Variant::Full, 12, DType::F64, 9).unwrap();
        let b = LongitudinalModel::new(&cfg(), Variant::Full, 12, DType::F64, 9).unwrap();
        for (name, _) in a.store.iter() {
            assert_eq!(a.store.values(name).unwrap(), b.store.values(name).unwrap());
        }
    }

    #[test]
    fn greedy_is_deterministic_and_beam_one_matches() {
        let m = LongitudinalModel::new(&cfg(), Variant::Full, 12, DType::F64, 3).unwrap();
        let x = inputs(3);
        let g1 = m.generate(&x, DecodeMode::Greedy, 8).unwrap();
        let g2 = m.generate(&x, DecodeMode::Greedy, 8).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(m.generate(&x, DecodeMode::Beam(1), 8).unwrap(), g1);
        for s in m.generate(&x, DecodeMode::Beam(3), 8).unwrap() {
            assert!(s.ids.len() <= 8);
        }
        assert!(m.generate(&x, DecodeMode::Greedy, 0).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn out_of_range_tokens_are_rejected() {
        let m = LongitudinalModel::new(&cfg(), Variant::Baseline, 12, DType::F64, 1).unwrap();
        let ids = Tensor::from_slice(&[BOS, 12], (1, 2), &Device::Cpu).unwrap();
        assert!(matches!(m.forward(&inputs(1), &ids), Err(Error::TokenOutOfRange { id: 12, size: 12 })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = LongitudinalModel::new(&cfg(), Variant::SimpleFusion, 12, DType::F32, 4).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = LongitudinalModel::load(buf.as_slice(), DType::F32).unwrap();
        assert_eq!(back.variant, Variant::SimpleFusion);
        assert_eq!(back.cfg, m.cfg);
        let x = inputs(2);
        let x32 = ModelInputs {
            current_image: x.current_image.to_dtype(DType::F32).unwrap(),
            previous_image: x.previous_image.map(|t| t.to_dtype(DType::F32).unwrap()),
            previous_report: x.previous_report,
        };
        assert_eq!(
            m.generate(&x32, DecodeMode::Greedy, 6).unwrap(),
            back.generate(&x32, DecodeMode::Greedy, 6).unwrap()
        );
    }
}

//! Token-level cross-entropy, the two-group Adam optimizer with per-epoch
//! decay, the training loop and the five-variant ablation harness.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use candle_core::{backprop::GradStore, DType, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig, Variant};
use crate::corpus::LongitudinalSample;
use crate::error::{Error, Result};
use crate::evaluation::{bleu, evaluate, EvalRecord, Labeler, MetricReport};
use crate::model::{DecodeMode, InputTrace, LongitudinalModel, ModelInputs};
use crate::nn::{log_softmax_last, ParamGroup, ParamStore};
use crate::text::{TokenSeq, Vocabulary, EOS, PAD};
use crate::vision::FeatureStore;

/// One sample with features looked up and text encoded.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    /// `(patches, feature_dim)`.
    pub current_image: Tensor,
    pub previous_image: Tensor,
    /// Previous findings, truncated to the text encoder's positions.
    pub previous_report: TokenSeq,
    /// `BOS w1 .. wn EOS`, truncated so the decoder input fits.
    pub target: TokenSeq,
    pub target_text: String,
    pub previous_text: String,
}

/// Encodes samples for training or decoding. Images resolve through each
/// visit's primary (frontal when available) image.
pub fn prepare_samples(
    samples: &[LongitudinalSample],
    vocab: &Vocabulary,
    features: &FeatureStore,
    cfg: &ModelConfig,
) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let mut prev = vocab.encode_text(s.prev_findings(), false);
            prev.ids.truncate(cfg.max_report_len);
            if prev.ids.is_empty() {
                prev.ids.push(EOS);
            }
            let prev = TokenSeq::new(prev.ids);
            let mut target = vocab.encode_text(s.target_findings(), true);
            if target.ids.len() > cfg.max_target_len + 1 {
                target.ids.truncate(cfg.max_target_len);
                target.ids.push(EOS);
            }
            Ok(PreparedSample {
                id: s.id(),
                current_image: features.get(s.curr.primary_image())?.clone(),
                previous_image: features.get(s.prev.primary_image())?.clone(),
                previous_report: prev,
                target: TokenSeq::new(target.ids),
                target_text: s.target_findings().to_string(),
                previous_text: s.prev_findings().to_string(),
            })
        })
        .collect()
}

/// Model inputs plus shifted decoder input/target ids, PAD-filled.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: ModelInputs,
    /// `(batch, T)`: `BOS w1 .. wn`.
    pub decoder_input: Tensor,
    /// `(batch, T)`: `w1 .. wn EOS`, PAD past the end.
    pub targets: Tensor,
}

/// Model inputs only (for decoding).
pub fn batch_inputs(samples: &[&PreparedSample]) -> Result<ModelInputs> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let stack = |f: fn(&PreparedSample) -> &Tensor| -> Result<Tensor> {
        let ts: Vec<Tensor> = samples.iter().map(|s| f(s).unsqueeze(0)).collect::<std::result::Result<_, _>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    };
    let m = samples.iter().map(|s| s.previous_report.ids.len()).max().unwrap_or(1);
    let mut ids = Vec::with_capacity(samples.len() * m);
    let mut lengths = Vec::with_capacity(samples.len());
    for s in samples {
        ids.extend(s.previous_report.padded(m).ids);
        lengths.push(s.previous_report.len);
    }
    let device = samples[0].current_image.device();
    Ok(ModelInputs {
        current_image: stack(|s| &s.current_image)?,
        previous_image: Some(stack(|s| &s.previous_image)?),
        previous_report: Some((Tensor::from_vec(ids, (samples.len(), m), device)?, lengths)),
    })
}

pub fn make_batch(samples: &[&PreparedSample]) -> Result<Batch> {
    let inputs = batch_inputs(samples)?;
    let t = samples.iter().map(|s| s.target.ids.len().saturating_sub(1)).max().unwrap_or(0);
    if t == 0 {
        return Err(Error::InvalidInput("targets need at least BOS and EOS".into()));
    }
    let mut dec = Vec::with_capacity(samples.len() * t);
    let mut tgt = Vec::with_capacity(samples.len() * t);
    for s in samples {
        let ids = &s.target.ids;
        let n = ids.len() - 1;
        dec.extend(ids[..n].iter().copied().chain(std::iter::repeat_n(PAD, t - n)));
        tgt.extend(ids[1..].iter().copied().chain(std::iter::repeat_n(PAD, t - n)));
    }
    let device = samples[0].current_image.device();
    Ok(Batch {
        inputs,
        decoder_input: Tensor::from_vec(dec, (samples.len(), t), device)?,
        targets: Tensor::from_vec(tgt, (samples.len(), t), device)?,
    })
}

/// Summed `−log p(target)` over non-PAD targets and the token count.
/// `logits` is `(batch, T, V)`, `targets` is `(batch, T)` u32.
pub fn token_nll(logits: &Tensor, targets: &Tensor) -> Result<(Tensor, usize)> {
    let (b, t, v) = logits.dims3()?;
    if targets.dims() != [b, t] {
        return Err(Error::Shape(format!("targets {:?} do not match logits ({b}, {t}, {v})", targets.dims())));
    }
    let ids: Vec<u32> = targets.flatten_all()?.to_vec1()?;
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= v) {
        return Err(Error::TokenOutOfRange { id, size: v });
    }
    let count = ids.iter().filter(|&&id| id != PAD).count();
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&targets.unsqueeze(D::Minus1)?, D::Minus1)?.squeeze(D::Minus1)?;
    let keep = targets.ne(PAD)?.to_dtype(logits.dtype())?;
    Ok(((picked * keep)?.sum_all()?.neg()?, count))
}

/// Mean cross-entropy over non-PAD target positions.
pub fn compute_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (sum, count) = token_nll(logits, targets)?;
    if count == 0 {
        return Err(Error::InvalidInput("every target position is padding".into()));
    }
    Ok((sum / count as f64)?)
}

/// `(lr_visual, lr_other) · decay^epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let f = cfg.lr_decay.powi(epoch as i32);
    (cfg.lr_visual * f, cfg.lr_other * f)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with one learning rate per parameter group. Parameters that
/// received no gradient keep their value and moments.
#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    moments: BTreeMap<String, (Tensor, Tensor, i32)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, moments: BTreeMap::new() }
    }

    /// Global L2 norm of all gradients present in `grads`.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, p) in store.iter() {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    /// One update. `lr` maps a group to its learning rate; `scale`
    /// multiplies every gradient (used for clipping).
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        lr: impl Fn(ParamGroup) -> f64,
        scale: f64,
    ) -> Result<usize> {
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let mut updated = 0;
        for (name, p) in store.iter() {
            let Some(g) = grads.get(p.var.as_tensor()) else { continue };
            let g = (g.detach() * scale)?;
            let (m, v, t) = match self.moments.get(name) {
                Some((m, v, t)) => (m.clone(), v.clone(), *t),
                None => (g.zeros_like()?, g.zeros_like()?, 0),
            };
            let t = t + 1;
            let m = ((m * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / (1.0 - beta1.powi(t)))?;
            let v_hat = (&v / (1.0 - beta2.powi(t)))?;
            let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (p.var.as_tensor().detach() - (delta * lr(p.group))?)?;
            p.var.set(&next)?;
            self.moments.insert(name.to_string(), (m, v, t));
            updated += 1;
        }
        Ok(updated)
    }
}

/// One JSONL log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub lr_visual: f64,
    pub lr_other: f64,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu_4: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub best_epoch: Option<usize>,
    pub best_validation_loss: Option<f64>,
    pub traces: Vec<InputTrace>,
}

/// Token-mean loss over a dataset without updating parameters.
pub fn dataset_loss(model: &LongitudinalModel, data: &[PreparedSample], batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let (logits, _) = model.forward(&batch.inputs, &batch.decoder_input)?;
        let (s, c) = token_nll(&logits, &batch.targets)?;
        sum += s.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        count += c;
    }
    if count == 0 {
        return Err(Error::InvalidInput("no target tokens".into()));
    }
    Ok(sum / count as f64)
}

/// Greedy decoding of every sample, in order.
pub fn generate_all(
    model: &LongitudinalModel,
    data: &[PreparedSample],
    mode: DecodeMode,
    max_len: usize,
    batch_size: usize,
) -> Result<Vec<TokenSeq>> {
    let mut out = Vec::with_capacity(data.len());
    let chunk = if matches!(mode, DecodeMode::Greedy) { batch_size.max(1) } else { 1 };
    for part in data.chunks(chunk) {
        let refs: Vec<&PreparedSample> = part.iter().collect();
        out.extend(model.generate(&batch_inputs(&refs)?, mode, max_len)?);
    }
    Ok(out)
}

/// Corpus BLEU-4 of greedy outputs against target ids.
pub fn greedy_bleu4(model: &LongitudinalModel, data: &[PreparedSample], batch_size: usize) -> Result<f64> {
    let gen = generate_all(model, data, DecodeMode::Greedy, model.cfg.max_target_len, batch_size)?;
    let words = |ids: &[u32]| ids.iter().filter(|&&i| i > EOS).map(|i| i.to_string()).collect::<Vec<_>>();
    let cands: Vec<Vec<String>> = gen.iter().map(|s| words(&s.ids)).collect();
    let refs: Vec<Vec<String>> = data.iter().map(|s| words(&s.target.ids)).collect();
    bleu(&cands, &refs, 4)
}

/// Trains in place. Batches are reshuffled each epoch from the seed. With a
/// validation set the parameters with the lowest validation loss are
/// restored at the end. Each epoch's log lines go to `log` as JSONL.
pub fn train(
    model: &LongitudinalModel,
    train_set: &[PreparedSample],
    validation: &[PreparedSample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        logs: Vec::new(),
        epochs_run: 0,
        final_train_loss: f64::NAN,
        best_epoch: None,
        best_validation_loss: None,
        traces: Vec::new(),
    };
    let mut best: Option<BTreeMap<String, Tensor>> = None;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let (lr_visual, lr_other) = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut tokens = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = make_batch(&refs)?;
            let (logits, trace) = model.forward(&batch.inputs, &batch.decoder_input)?;
            if !report.traces.contains(&trace) {
                report.traces.push(trace);
            }
            let (nll, count) = token_nll(&logits, &batch.targets)?;
            let loss = (nll / count as f64)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            let grads = loss.backward()?;
            let scale = match cfg.grad_clip {
                Some(max) => {
                    let norm = Adam::grad_norm(&model.store, &grads)?;
                    if !norm.is_finite() {
                        return Err(Error::Diverged { epoch, step, loss: value });
                    }
                    if norm > max { max / norm } else { 1.0 }
                }
                None => 1.0,
            };
            adam.step(
                &model.store,
                &grads,
                |g| match g {
                    ParamGroup::Visual => lr_visual,
                    ParamGroup::Other => lr_other,
                },
                scale,
            )?;
            sum += value * count as f64;
            tokens += count;
        }
        let train_loss = sum / tokens.max(1) as f64;
        report.final_train_loss = train_loss;
        report.epochs_run = epoch + 1;
        let mut lines = vec![EpochLog {
            epoch,
            split: "train".into(),
            loss: train_loss,
            lr_visual,
            lr_other,
            wall_time_s: start.elapsed().as_secs_f64(),
            bleu_4: None,
        }];
        if !validation.is_empty() {
            let val_loss = dataset_loss(model, validation, cfg.batch_size)?;
            let bleu_4 = greedy_bleu4(model, validation, cfg.batch_size)?;
            if report.best_validation_loss.is_none_or(|b| val_loss < b) {
                report.best_validation_loss = Some(val_loss);
                report.best_epoch = Some(epoch);
                best = Some(snapshot(&model.store)?);
            }
            lines.push(EpochLog {
                epoch,
                split: "validation".into(),
                loss: val_loss,
                lr_visual,
                lr_other,
                wall_time_s: start.elapsed().as_secs_f64(),
                bleu_4: Some(bleu_4),
            });
        }
        for line in &lines {
            log::info!("epoch {} {} loss {:.5}", line.epoch, line.split, line.loss);
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, line)?;
                w.write_all(b"\n")?;
            }
        }
        report.logs.extend(lines);
        if cfg.target_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }
    if let Some(best) = best {
        for (name, value) in &best {
            model.store.set(name, value)?;
        }
    }
    Ok(report)
}

fn snapshot(store: &ParamStore) -> Result<BTreeMap<String, Tensor>> {
    store.iter().map(|(n, p)| Ok((n.to_string(), p.var.as_tensor().copy()?))).collect()
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: MetricReport,
    pub trace: InputTrace,
    pub final_train_loss: f64,
}

pub const ABLATION_HEADER: [&str; 11] = ["variant", "BL-1", "BL-2", "BL-3", "BL-4", "M", "R_L", "A", "P", "R", "F-1"];

/// Trains and scores each variant from the same seed.
pub fn run_ablation<L: Labeler + ?Sized>(
    variants: &[Variant],
    train_set: &[PreparedSample],
    eval_set: &[PreparedSample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    vocab: &Vocabulary,
    labeler: &L,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = TrainConfig { variant, ..train_cfg.clone() };
        let model = LongitudinalModel::new(model_cfg, variant, vocab.len(), DType::F32, cfg.seed)?;
        let report = train(&model, train_set, &[], &cfg, None)?;
        let gen = generate_all(&model, eval_set, DecodeMode::Greedy, model_cfg.max_target_len, cfg.batch_size)?;
        let records = eval_set
            .iter()
            .zip(&gen)
            .map(|(s, g)| {
                Ok(EvalRecord {
                    id: s.id.clone(),
                    generated: vocab.decode(g)?,
                    reference: s.target_text.clone(),
                    previous: Some(s.previous_text.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let trace = match report.traces.as_slice() {
            [t] => *t,
            _ => return Err(Error::InvalidInput(format!("variant {variant} produced inconsistent input traces"))),
        };
        rows.push(AblationRow { variant, metrics: evaluate(&records, labeler)?, trace, final_train_loss: report.final_train_loss });
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(ABLATION_HEADER)?;
    for r in rows {
        let mut rec = vec![r.variant.label().to_string()];
        rec.extend(r.metrics.row().iter().map(|v| format!("{v:.4}")));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn confident_model_has_zero_loss() {
        let mut v = vec![-1e4; 2 * 5];
        v[3] = 0.0;
        v[5 + 2] = 0.0;
        let logits = Tensor::from_vec(v, (1, 2, 5), &Device::Cpu).unwrap();
        let targets = Tensor::from_slice(&[3u32, 2], (1, 2), &Device::Cpu).unwrap();
        assert!(scalar(&compute_loss(&logits, &targets).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros((2, 3, 100), DType::F64, &Device::Cpu).unwrap();
        let targets = Tensor::from_slice(&[4u32, 9, 99, 7, 2, 50], (2, 3), &Device::Cpu).unwrap();
        assert!((scalar(&compute_loss(&logits, &targets).unwrap()) - 100f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn padding_does_not_change_loss() {
        let vals: Vec<f64> = (0..3 * 7).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.4).collect();
        let logits = Tensor::from_vec(vals.clone(), (1, 3, 7), &Device::Cpu).unwrap();
        let targets = Tensor::from_slice(&[4u32, 5, 2], (1, 3), &Device::Cpu).unwrap();
        let mut padded_vals = vals;
        padded_vals.extend((0..5 * 7).map(|i| i as f64));
        let padded = Tensor::from_vec(padded_vals, (1, 8, 7), &Device::Cpu).unwrap();
        let padded_targets = Tensor::from_slice(&[4u32, 5, 2, 0, 0, 0, 0, 0], (1, 8), &Device::Cpu).unwrap();
        let a = scalar(&compute_loss(&logits, &targets).unwrap());
        let b = scalar(&compute_loss(&padded, &padded_targets).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn all_padding_is_an_error() {
        let logits = Tensor::zeros((1, 2, 5), DType::F64, &Device::Cpu).unwrap();
        let targets = Tensor::zeros((1, 2), DType::U32, &Device::Cpu).unwrap();
        assert!(compute_loss(&logits, &targets).is_err());
    }

    #[test]
    fn schedule_decays_per_epoch() {
        let cfg = TrainConfig::default();
        let close = |(a, b): (f64, f64), (x, y): (f64, f64)| (a - x).abs() < 1e-15 && (b - y).abs() < 1e-15;
        assert!(close(lr_schedule(0, &cfg), (5e-5, 1e-4)));
        assert!(close(lr_schedule(1, &cfg), (4e-5, 8e-5)));
        assert!(close(lr_schedule(2, &cfg), (3.2e-5, 6.4e-5)));
    }

    #[test]
    fn adam_uses_group_rates_and_skips_unused() {
        let mut store = ParamStore::new(DType::F64, 0);
        let a = store.constant("a", &[2], 1.0, ParamGroup::Visual).unwrap();
        let b = store.constant("b", &[2], 1.0, ParamGroup::Other).unwrap();
        store.constant("unused", &[2], 1.0, ParamGroup::Other).unwrap();
        let loss = (a.sum_all().unwrap() + b.sum_all().unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let n = adam
            .step(&store, &grads, |g| if g == ParamGroup::Visual { 0.1 } else { 0.01 }, 1.0)
            .unwrap();
        assert_eq!(n, 2);
        // first Adam step moves each coordinate by ~lr
        for v in store.values("a").unwrap() {
            assert!((v - 0.9).abs() < 1e-6);
        }
        for v in store.values("b").unwrap() {
            assert!((v - 0.99).abs() < 1e-6);
        }
        assert_eq!(store.values("unused").unwrap(), vec![1.0, 1.0]);
    }
}

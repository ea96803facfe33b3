use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use prefill_core::config::{ModelConfig, Variant};
use prefill_core::fusion::CrossAttentionFusion;
use prefill_core::memory_decoder::{Mcln, RelationalMemory};
use prefill_core::model::{LongitudinalModel, ModelInputs};
use prefill_core::nn::ParamStore;
use prefill_core::training::compute_loss;

use super::gradient_errors;

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

pub fn wave(shape: &[usize], phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|i| ((i as f64 + phase) * 0.731).sin()).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn project(out: &Tensor, phase: f64) -> Tensor {
    (out * wave(out.dims(), phase)).unwrap().sum_all().unwrap()
}

/// 2 blocks, width 16, 4 heads, 2 slots.
pub fn toy() -> ModelConfig {
    ModelConfig {
        feature_dim: 6,
        hidden: 16,
        heads: 4,
        encoder_layers: 1,
        decoder_layers: 2,
        ff_dim: 24,
        memory_slots: 2,
        memory_heads: 4,
        max_target_len: 8,
        max_report_len: 6,
        ..ModelConfig::default()
    }
}

pub fn mcln_errors() -> BTreeMap<String, f64> {
    let mut store = ParamStore::new(DType::F64, 1);
    let n = Mcln::new(&mut store, "n", 4, 6).unwrap();
    // move offsets away from zero so every path carries gradient
    store.set_values("n.delta_gamma.bias", &[0.1, -0.2, 0.3, 0.05]).unwrap();
    let x = wave(&[2, 3, 4], 0.5);
    let m = wave(&[2, 3, 6], 2.0);
    gradient_errors(&store, 12, STEP, || project(&n.forward(&x, Some(&m)).unwrap(), 1.0))
}

pub fn cross_attention_errors() -> BTreeMap<String, f64> {
    let mut store = ParamStore::new(DType::F64, 2);
    let f = CrossAttentionFusion::new(&mut store, 8, 2).unwrap();
    let img = wave(&[2, 3, 8], 0.0);
    let rep = wave(&[2, 4, 8], 3.0);
    gradient_errors(&store, 12, STEP, || project(&f.fuse_batch(&img, &rep, &[4, 2]).unwrap().states, 7.0))
}

pub fn memory_update_errors() -> BTreeMap<String, f64> {
    let cfg = ModelConfig { hidden: 8, memory_slots: 2, memory_heads: 2, ..toy() };
    let mut store = ParamStore::new(DType::F64, 3);
    let rm = RelationalMemory::new(&mut store, &cfg).unwrap();
    let tokens = wave(&[2, 3, 8], 1.5);
    gradient_errors(&store, 12, STEP, || project(&rm.sequence(&tokens).unwrap(), 4.0))
}

pub fn full_model_errors() -> BTreeMap<String, f64> {
    let model = LongitudinalModel::new(&toy(), Variant::Full, 13, DType::F64, 5).unwrap();
    let inputs = ModelInputs {
        current_image: wave(&[2, 4, 6], 0.0),
        previous_image: Some(wave(&[2, 4, 6], 9.0)),
        previous_report: Some((
            Tensor::from_slice(&[4u32, 5, 6, 7, 8, 9, 10, 0], (2, 4), &Device::Cpu).unwrap(),
            vec![4, 3],
        )),
    };
    let dec = Tensor::from_slice(&[1u32, 4, 5, 6, 1, 7, 8, 0], (2, 4), &Device::Cpu).unwrap();
    let tgt = Tensor::from_slice(&[4u32, 5, 6, 2, 7, 8, 2, 0], (2, 4), &Device::Cpu).unwrap();
    gradient_errors(&model.store, 6, STEP, || {
        compute_loss(&model.forward(&inputs, &dec).unwrap().0, &tgt).unwrap()
    })
}

/// Largest error and the tensor it belongs to.
pub fn worst(errors: &BTreeMap<String, f64>) -> (String, f64) {
    errors
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k.clone(), *v))
        .unwrap_or_default()
}

mod common;

use candle_core::{DType, Device, Tensor};
use prefill_core::config::{ModelConfig, Variant};
use prefill_core::model::{LongitudinalModel, ModelInputs};
use prefill_core::nn::{scaled_dot_attention, softmax_last, AttnMask, MultiHeadAttention, ParamStore};
use proptest::prelude::*;

fn rows(t: &Tensor, width: usize) -> Vec<Vec<f64>> {
    common::flat(t).chunks(width).map(|c| c.to_vec()).collect()
}

#[test]
fn single_head_matches_dense_oracle() {
    let dev = Device::Cpu;
    let q = Tensor::from_vec(vec![0.3, -1.2, 0.8, 0.5, 0.1, 2.0], (1, 2, 3), &dev).unwrap();
    let k = Tensor::from_vec(vec![1.0, 0.2, -0.4, -0.7, 0.9, 0.3, 0.0, -1.1, 0.6, 0.25, 0.5, 0.75], (1, 4, 3), &dev).unwrap();
    let v = Tensor::from_vec((0..12).map(|i| (i as f64 * 0.37).cos()).collect::<Vec<_>>(), (1, 4, 3), &dev).unwrap();
    let mask = AttnMask::key_padding(&[3], 4, DType::F64, &dev).unwrap();
    let (out, _) = scaled_dot_attention(&q, &k, &v, 1, Some(&mask)).unwrap();
    let expect = common::dense_attention(&rows(&q, 3), &rows(&k, 3), &rows(&v, 3), Some(&[true, true, true, false]));
    for (a, b) in rows(&out, 3).iter().flatten().zip(expect.iter().flatten()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn two_heads_match_per_head_oracle() {
    let dev = Device::Cpu;
    let q = Tensor::from_vec((0..8).map(|i| (i as f64 * 0.9).sin()).collect::<Vec<_>>(), (1, 2, 4), &dev).unwrap();
    let k = Tensor::from_vec((0..12).map(|i| (i as f64 * 0.4).cos()).collect::<Vec<_>>(), (1, 3, 4), &dev).unwrap();
    let v = Tensor::from_vec((0..12).map(|i| i as f64 * 0.1 - 0.5).collect::<Vec<_>>(), (1, 3, 4), &dev).unwrap();
    let (out, _) = scaled_dot_attention(&q, &k, &v, 2, None).unwrap();
    let got = rows(&out, 4);
    let cols = |r: Vec<Vec<f64>>, h: usize| -> Vec<Vec<f64>> { r.into_iter().map(|x| x[2 * h..2 * h + 2].to_vec()).collect() };
    for h in 0..2 {
        let expect = common::dense_attention(&cols(rows(&q, 4), h), &cols(rows(&k, 4), h), &cols(rows(&v, 4), h), None);
        for (t, row) in expect.iter().enumerate() {
            for c in 0..2 {
                assert!((got[t][2 * h + c] - row[c]).abs() < 1e-10);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attention_and_output_rows_sum_to_one(
        seed in 0u64..10_000,
        heads in 1usize..4,
        t in 1usize..6,
        keys in 1usize..7,
        scale in 0.1f64..20.0,
        valid_frac in 0.0f64..1.0,
    ) {
        let dev = Device::Cpu;
        let d = 4 * heads;
        let mut store = ParamStore::new(DType::F64, seed);
        let mha = MultiHeadAttention::new(&mut store, "a", d, heads).unwrap();
        let wave = |n: usize, p: f64| -> Vec<f64> { (0..n).map(|i| ((i as f64 + p + seed as f64) * 1.37).sin() * scale).collect() };
        let q = Tensor::from_vec(wave(t * d, 0.0), (1, t, d), &dev).unwrap();
        let kv = Tensor::from_vec(wave(keys * d, 5.0), (1, keys, d), &dev).unwrap();
        let valid = ((keys as f64 * valid_frac).ceil() as usize).clamp(1, keys);
        let mask = AttnMask::key_padding(&[valid], keys, DType::F64, &dev).unwrap();
        let (_, probs) = mha.forward_with_probs(&q, &kv, Some(&mask)).unwrap();
        for row in common::flat(&probs).chunks(keys) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row[valid..].iter().all(|p| *p < 1e-12));
        }
        let logits = Tensor::from_vec(wave(t * 9, 2.0), (t, 9), &dev).unwrap();
        for row in common::flat(&softmax_last(&logits).unwrap()).chunks(9) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn model_output_distributions_sum_to_one() {
    let cfg = ModelConfig {
        feature_dim: 6,
        hidden: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 2,
        ff_dim: 16,
        memory_slots: 2,
        memory_heads: 2,
        max_target_len: 8,
        max_report_len: 6,
        ..ModelConfig::default()
    };
    let dev = Device::Cpu;
    for seed in 0..10 {
        let m = LongitudinalModel::new(&cfg, Variant::Full, 15, DType::F64, seed).unwrap();
        let inputs = ModelInputs {
            current_image: Tensor::randn(0.0, 3.0, (2, 4, 6), &dev).unwrap(),
            previous_image: Some(Tensor::randn(0.0, 3.0, (2, 4, 6), &dev).unwrap()),
            previous_report: Some((Tensor::from_slice(&[4u32, 5, 6, 7, 8, 0], (2, 3), &dev).unwrap(), vec![3, 2])),
        };
        let ids = Tensor::from_slice(&[1u32, 9, 10, 1, 11, 12], (2, 3), &dev).unwrap();
        let p = softmax_last(&m.forward(&inputs, &ids).unwrap().0).unwrap();
        for row in common::flat(&p).chunks(15) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

//! Small synthetic corpus plus scaled-down configs for overfitting runs.

use std::collections::BTreeMap;

use crate::config::{ModelConfig, TrainConfig, Variant};
use crate::corpus::{
    build_longitudinal_pairs, generate_synthetic_corpus, group_by_patient, parse_metadata, LongitudinalSample,
    SyntheticCorpus, VocabSpec,
};
use crate::error::{Error, Result};
use crate::text::Vocabulary;
use crate::training::{prepare_samples, PreparedSample};
use crate::vision::{FeatureStore, StubBackend, VisionBackend};

#[derive(Debug, Clone)]
pub struct Fixture {
    pub corpus: SyntheticCorpus,
    pub samples: Vec<LongitudinalSample>,
    pub vocab: Vocabulary,
    pub features: FeatureStore,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prepared: Vec<PreparedSample>,
}

/// Width 128, 2 encoder and 2 decoder blocks, 4 heads, 2 memory slots.
pub fn overfit_model_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 2048,
        hidden: 128,
        heads: 4,
        encoder_layers: 2,
        decoder_layers: 2,
        ff_dim: 256,
        memory_slots: 2,
        memory_heads: 4,
        beta: 0.2,
        max_target_len: 64,
        max_report_len: 64,
        image_size: 128,
        image_positions: false,
    }
}

pub fn overfit_train_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        epochs: 300,
        lr_visual: 5e-4,
        lr_other: 1e-3,
        lr_decay: 1.0,
        batch_size: 8,
        seed: 7,
        variant,
        grad_clip: Some(5.0),
        min_freq: 1,
        target_loss: Some(0.02),
    }
}

/// `n_patients` patients with three visits each, i.e. `2 · n_patients`
/// samples, all findings present.
pub fn synthetic_fixture(seed: u64, n_patients: usize, model: ModelConfig, train: TrainConfig) -> Result<Fixture> {
    let histogram = BTreeMap::from([(3usize, 1.0)]);
    let corpus = generate_synthetic_corpus(seed, n_patients, &histogram, &VocabSpec::default())?;
    let parsed = parse_metadata(corpus.metadata_csv.as_bytes(), &corpus.reports)?;
    if !parsed.errors.is_empty() || !parsed.missing_reports.is_empty() {
        return Err(Error::InvalidInput("synthetic metadata failed to parse".into()));
    }
    let (samples, _) = build_longitudinal_pairs(&group_by_patient(parsed.records)?);
    let texts: Vec<String> = samples
        .iter()
        .flat_map(|s| [s.prev_findings().to_string(), s.target_findings().to_string()])
        .collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), train.min_freq)?;
    let backend = StubBackend::new(seed, model.image_size, model.feature_dim)?;
    let mut features = FeatureStore::new();
    for id in &corpus.image_ids {
        let img = image::DynamicImage::ImageLuma8(corpus.render_image(id, model.image_size));
        features.insert(id, backend.extract(&img)?.tensor().clone());
    }
    let prepared = prepare_samples(&samples, &vocab, &features, &model)?;
    Ok(Fixture { corpus, samples, vocab, features, model, train, prepared })
}

/// The 32-sample overfit fixture.
pub fn overfit_fixture(variant: Variant) -> Result<Fixture> {
    synthetic_fixture(2024, 16, overfit_model_config(), overfit_train_config(variant))
}

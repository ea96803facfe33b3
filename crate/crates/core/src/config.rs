//! Model and training hyperparameters plus the flat `key = value` config format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which inputs the decoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Current image only, plain transformer decoder (no memory).
    Baseline,
    /// Current image + encoded previous image as longitudinal context.
    PlusImage,
    /// Current image + encoded previous report as longitudinal context.
    PlusReport,
    /// Concatenated previous image and report encodings, no cross-attention.
    SimpleFusion,
    /// Cross-attention fusion of previous image and report.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::PlusImage,
        Variant::PlusReport,
        Variant::SimpleFusion,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PlusImage => "plus_image",
            Variant::PlusReport => "plus_report",
            Variant::SimpleFusion => "simple_fusion",
            Variant::Full => "full",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::PlusImage => "+ image",
            Variant::PlusReport => "+ report",
            Variant::SimpleFusion => "simple fusion",
            Variant::Full => "Ours",
        }
    }

    pub fn uses_prev_image(self) -> bool {
        matches!(self, Variant::PlusImage | Variant::SimpleFusion | Variant::Full)
    }

    pub fn uses_prev_report(self) -> bool {
        matches!(self, Variant::PlusReport | Variant::SimpleFusion | Variant::Full)
    }

    pub fn uses_cross_attention(self) -> bool {
        self == Variant::Full
    }

    pub fn uses_memory(self) -> bool {
        self != Variant::Baseline
    }

    pub fn has_longitudinal_context(self) -> bool {
        self != Variant::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::InvalidInput(format!(
                "unknown variant `{s}` (expected one of baseline, plus_image, plus_report, simple_fusion, full)"
            )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of backbone patch features.
    pub feature_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    pub memory_slots: usize,
    pub memory_heads: usize,
    /// Weight of sub-block-1's output in the per-block fusion layer.
    pub beta: f64,
    /// Longest decoder sequence, BOS/EOS included.
    pub max_target_len: usize,
    /// Longest previous report fed to the text encoder.
    pub max_report_len: usize,
    /// Side length images are resized to before feature extraction.
    pub image_size: u32,
    /// Learned positions for image patches.
    pub image_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 2048,
            hidden: 512,
            heads: 8,
            encoder_layers: 3,
            decoder_layers: 3,
            ff_dim: 2048,
            memory_slots: 3,
            memory_heads: 8,
            beta: 0.2,
            max_target_len: 100,
            max_report_len: 100,
            image_size: 224,
            image_positions: false,
        }
    }
}

impl ModelConfig {
    /// Patches per image for a backbone with stride-32 final features.
    pub fn patches(&self) -> usize {
        let side = (self.image_size / 32) as usize;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::BadConfigValue { key: key.into(), reason: reason.into() });
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad("hidden", "must be a positive multiple of heads");
        }
        if self.memory_heads == 0 || self.hidden % self.memory_heads != 0 {
            return bad("memory_heads", "must divide hidden");
        }
        if self.encoder_layers == 0 {
            return bad("encoder_layers", "must be at least 1");
        }
        if self.decoder_layers == 0 {
            return bad("decoder_layers", "must be at least 1");
        }
        if self.memory_slots == 0 {
            return bad("memory_slots", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta", "must lie in [0, 1]");
        }
        if self.image_size < 32 {
            return bad("image_size", "must be at least 32");
        }
        if self.max_target_len < 2 || self.max_report_len < 1 {
            return bad("max_target_len", "too small");
        }
        if self.feature_dim == 0 || self.ff_dim == 0 {
            return bad("feature_dim", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_visual: f64,
    pub lr_other: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub min_freq: usize,
    /// Stop once the epoch's mean token loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr_visual: 5e-5,
            lr_other: 1e-4,
            lr_decay: 0.8,
            batch_size: 8,
            seed: 42,
            variant: Variant::Full,
            grad_clip: Some(5.0),
            min_freq: 3,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::BadConfigValue { key: key.into(), reason: reason.into() });
        if !(self.lr_visual > 0.0) {
            return bad("lr_visual", "must be positive");
        }
        if !(self.lr_other > 0.0) {
            return bad("lr_other", "must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", "must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip", "must be positive (or `none`)");
        }
        Ok(())
    }
}

/// Both configs, addressed by flat keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| Error::BadConfigValue {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "feature_dim", "hidden", "heads", "encoder_layers", "decoder_layers", "ff_dim", "memory_slots",
        "memory_heads", "beta", "max_target_len", "max_report_len", "image_size", "image_positions",
        "epochs", "lr_visual", "lr_other", "lr_decay", "batch_size", "seed", "variant", "grad_clip",
        "min_freq", "target_loss",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "feature_dim" => m.feature_dim = parse(key, value)?,
            "hidden" => m.hidden = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "encoder_layers" => m.encoder_layers = parse(key, value)?,
            "decoder_layers" => m.decoder_layers = parse(key, value)?,
            "ff_dim" => m.ff_dim = parse(key, value)?,
            "memory_slots" => m.memory_slots = parse(key, value)?,
            "memory_heads" => m.memory_heads = parse(key, value)?,
            "beta" => m.beta = parse(key, value)?,
            "max_target_len" => m.max_target_len = parse(key, value)?,
            "max_report_len" => m.max_report_len = parse(key, value)?,
            "image_size" => m.image_size = parse(key, value)?,
            "image_positions" => m.image_positions = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lr_visual" => t.lr_visual = parse(key, value)?,
            "lr_other" => t.lr_other = parse(key, value)?,
            "lr_decay" => t.lr_decay = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "variant" => t.variant = parse(key, value)?,
            "grad_clip" => t.grad_clip = optional(key, value)?,
            "min_freq" => t.min_freq = parse(key, value)?,
            "target_loss" => t.target_loss = optional(key, value)?,
            other => return Err(Error::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::BadConfigValue {
                key: format!("line {}", i + 1),
                reason: format!("expected key = value, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Renders every key in the same flat format.
    pub fn to_flat_string(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("feature_dim", m.feature_dim.to_string()),
            ("hidden", m.hidden.to_string()),
            ("heads", m.heads.to_string()),
            ("encoder_layers", m.encoder_layers.to_string()),
            ("decoder_layers", m.decoder_layers.to_string()),
            ("ff_dim", m.ff_dim.to_string()),
            ("memory_slots", m.memory_slots.to_string()),
            ("memory_heads", m.memory_heads.to_string()),
            ("beta", m.beta.to_string()),
            ("max_target_len", m.max_target_len.to_string()),
            ("max_report_len", m.max_report_len.to_string()),
            ("image_size", m.image_size.to_string()),
            ("image_positions", m.image_positions.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr_visual", t.lr_visual.to_string()),
            ("lr_other", t.lr_other.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("variant", t.variant.to_string()),
            ("grad_clip", opt(t.grad_clip)),
            ("min_freq", t.min_freq.to_string()),
            ("target_loss", opt(t.target_loss)),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn optional(key: &str, value: &str) -> Result<Option<f64>> {
    match value.trim() {
        "none" | "off" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

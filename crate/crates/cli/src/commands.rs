use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use candle_core::DType;
use serde::Serialize;

use prefill_core::config::{RunConfig, Variant};
use prefill_core::corpus::{
    assign_splits, build_longitudinal_pairs, generate_synthetic_corpus, group_by_patient, parse_metadata,
    read_samples_jsonl, write_samples_jsonl, LongitudinalSample, ReportStore, Split, SplitManifest, VocabSpec,
};
use prefill_core::evaluation::{consistency_from_records, evaluate as score, read_eval_records, StubLabeler};
use prefill_core::model::{DecodeMode, LongitudinalModel};
use prefill_core::text::Vocabulary;
use prefill_core::training::{generate_all, prepare_samples, run_ablation, train as fit, write_ablation_csv, PreparedSample};
use prefill_core::vision::{backend_by_name, image_from_dir, FeatureCache, FeatureStore};

use crate::manifest::{write_atomic, RunManifest};
use crate::{AblateArgs, BuildDatasetArgs, ConfigArgs, DataArgs, EvaluateArgs, GenerateArgs, TrainArgs};

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const SPLITS_FILE: &str = "splits.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CONFIG_FILE: &str = "config.txt";

/// The stub backbone stands in for fixed pretrained weights, so its seed
/// does not follow the training seed.
const BACKEND_SEED: u64 = 0;

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("input not found: {}", path.display());
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> prefill_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(write_atomic(path, &buf)?)
}

fn resolve_config(args: &ConfigArgs, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        cfg.apply_str(&text)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = &args.variant {
        cfg.set("variant", v)?;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn paths(v: &[PathBuf]) -> Vec<&Path> {
    v.iter().map(PathBuf::as_path).collect()
}

fn parse_histogram(spec: &str) -> Result<BTreeMap<usize, f64>> {
    spec.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (n, w) = p.split_once(':').ok_or_else(|| anyhow!("histogram entry `{p}` is not count:weight"))?;
            Ok((n.trim().parse()?, w.trim().parse()?))
        })
        .collect()
}

pub fn build_dataset(a: &BuildDatasetArgs) -> Result<()> {
    out_dir(&a.out)?;
    let fallback = a.fallback_split.as_deref().map(str::parse::<Split>).transpose()?;
    let mut inputs: Vec<PathBuf> = Vec::new();
    let (metadata, reports, splits) = match a.synthetic_patients {
        Some(n) => {
            let corpus = generate_synthetic_corpus(a.seed, n, &parse_histogram(&a.visits)?, &VocabSpec::default())?;
            let dir = a.out.join("corpus");
            corpus.write_to(&dir, a.image_side)?;
            (dir.join("metadata.csv"), dir.join("reports.csv"), Some(dir.join("splits.csv")))
        }
        None => {
            let (m, r) = (a.metadata.clone().unwrap_or_default(), a.reports.clone().unwrap_or_default());
            require(&m)?;
            require(&r)?;
            inputs.extend([m.clone(), r.clone()]);
            if let Some(s) = &a.splits {
                require(s)?;
                inputs.push(s.clone());
            }
            (m, r, a.splits.clone())
        }
    };
    let config = format!(
        "synthetic_patients = {}\nvisits = {}\nfallback_split = {}\nskip_bad_rows = {}\n",
        a.synthetic_patients.map_or_else(|| "none".into(), |n| n.to_string()),
        a.visits,
        a.fallback_split.as_deref().unwrap_or("none"),
        a.skip_bad_rows
    );
    let manifest = RunManifest::start("build-dataset", config, a.seed, &paths(&inputs))?;
    manifest.write(&a.out)?;

    let store = ReportStore::load(&reports).with_context(|| format!("cannot load reports from {}", reports.display()))?;
    let parsed = parse_metadata(File::open(&metadata)?, &store)?;
    if !a.skip_bad_rows && (!parsed.errors.is_empty() || !parsed.missing_reports.is_empty()) {
        let mut msg = String::new();
        for e in parsed.errors.iter().take(10) {
            msg.push_str(&format!("\n  line {}: {}", e.line, e.message));
        }
        if !parsed.missing_reports.is_empty() {
            msg.push_str(&format!("\n  {} studies without a report", parsed.missing_reports.len()));
        }
        bail!("metadata failed validation ({} bad rows):{msg}", parsed.errors.len());
    }
    for e in &parsed.errors {
        log::warn!("skipping metadata line {}: {}", e.line, e.message);
    }
    let (samples, mut stats) = build_longitudinal_pairs(&group_by_patient(parsed.records)?);
    let split_manifest = match &splits {
        Some(p) => SplitManifest::from_csv(File::open(p)?)?,
        None => SplitManifest::default(),
    };
    let samples = assign_splits(samples, &split_manifest, fallback)?;
    stats.record_splits(&samples);
    let effective = SplitManifest::from_pairs(samples.iter().filter_map(|s| Some((s.patient_id.as_str(), s.split?))))?;

    let outputs = vec![a.out.join(SAMPLES_FILE), a.out.join(STATS_FILE), a.out.join(SPLITS_FILE)];
    write_with(&outputs[0], |w| write_samples_jsonl(&samples, w))?;
    write_json(&outputs[1], &stats)?;
    write_with(&outputs[2], |w| effective.write_csv(w))?;
    manifest.finish(&a.out, outputs)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn load_samples(data: &Path) -> Result<Vec<LongitudinalSample>> {
    let path = data.join(SAMPLES_FILE);
    require(&path)?;
    Ok(read_samples_jsonl(File::open(&path)?)?)
}

fn in_split(samples: &[LongitudinalSample], split: &str) -> Result<Vec<LongitudinalSample>> {
    let split: Split = split.parse()?;
    Ok(samples.iter().filter(|s| s.split == Some(split)).cloned().collect())
}

fn images_dir(d: &DataArgs) -> PathBuf {
    d.images.clone().unwrap_or_else(|| d.data.join("corpus").join("images"))
}

fn load_features(d: &DataArgs, samples: &[&LongitudinalSample], cfg: &RunConfig) -> Result<FeatureStore> {
    let backend = backend_by_name(&d.backend, BACKEND_SEED, cfg.model.image_size, cfg.model.feature_dim)?;
    let ids: Vec<String> = samples
        .iter()
        .flat_map(|s| [s.prev.primary_image().to_string(), s.curr.primary_image().to_string()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let dir = images_dir(d);
    let mut cache = d.feature_cache.as_deref().map(FeatureCache::open).transpose()?;
    let mut store = FeatureStore::new();
    store.extract_missing(&ids, |id| image_from_dir(&dir, id), backend.as_ref(), cache.as_mut())?;
    Ok(store)
}

fn data_inputs(d: &DataArgs) -> Vec<PathBuf> {
    vec![d.data.join(SAMPLES_FILE), images_dir(d)]
}

fn prepare(d: &DataArgs, samples: &[LongitudinalSample], vocab: &Vocabulary, cfg: &RunConfig) -> Result<Vec<PreparedSample>> {
    let refs: Vec<&LongitudinalSample> = samples.iter().collect();
    let features = load_features(d, &refs, cfg)?;
    Ok(prepare_samples(samples, vocab, &features, &cfg.model)?)
}

fn build_vocab(samples: &[LongitudinalSample], min_freq: usize) -> Result<Vocabulary> {
    let texts = samples.iter().flat_map(|s| [s.prev_findings(), s.target_findings()]);
    Ok(Vocabulary::build(texts, min_freq)?)
}

fn labeler(rules: Option<&Path>) -> Result<StubLabeler> {
    match rules {
        Some(p) => Ok(StubLabeler::from_json(&fs::read_to_string(p)?)?),
        None => Ok(StubLabeler::shared().clone()),
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.config, RunConfig::default())?;
    let all = load_samples(&a.data.data)?;
    let inputs = data_inputs(&a.data);
    out_dir(&a.out)?;
    let manifest = RunManifest::start(
        "train",
        cfg.to_flat_string(),
        cfg.train.seed,
        &paths(&inputs),
    )?;
    manifest.write(&a.out)?;

    let train_samples = in_split(&all, &a.train_split)?;
    if train_samples.is_empty() {
        bail!("no samples in split `{}`", a.train_split);
    }
    let val_samples = in_split(&all, &a.val_split)?;
    let vocab = build_vocab(&train_samples, cfg.train.min_freq)?;
    let train_set = prepare(&a.data, &train_samples, &vocab, &cfg)?;
    let val_set = prepare(&a.data, &val_samples, &vocab, &cfg)?;

    let model = LongitudinalModel::new(&cfg.model, cfg.train.variant, vocab.len(), DType::F32, cfg.train.seed)?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let report = fit(&model, &train_set, &val_set, &cfg.train, Some(&mut log))?;
    log.flush()?;

    let outputs = vec![
        a.out.join(CHECKPOINT_FILE),
        a.out.join(VOCAB_FILE),
        a.out.join(CONFIG_FILE),
        a.out.join("train_report.json"),
        log_path,
    ];
    write_with(&outputs[0], |w| model.save(w))?;
    write_with(&outputs[1], |w| vocab.write_json(w))?;
    write_atomic(&outputs[2], cfg.to_flat_string().as_bytes())?;
    write_json(&outputs[3], &report)?;
    manifest.finish(&a.out, outputs)?;
    println!(
        "variant {} trained {} epochs on {} samples; final train loss {:.4}{}",
        cfg.train.variant,
        report.epochs_run,
        train_set.len(),
        report.final_train_loss,
        report
            .best_validation_loss
            .map(|v| format!("; best validation loss {v:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct GeneratedLine<'a> {
    id: &'a str,
    generated: String,
    reference: &'a str,
    previous: &'a str,
    tokens: usize,
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    for f in [CHECKPOINT_FILE, VOCAB_FILE, CONFIG_FILE] {
        require(&a.run.join(f))?;
    }
    let mut cfg = RunConfig::default();
    cfg.apply_str(&fs::read_to_string(a.run.join(CONFIG_FILE))?)?;
    let mode = match a.beam {
        None => DecodeMode::Greedy,
        Some(0) => bail!("--beam must be at least 1"),
        Some(k) => DecodeMode::Beam(k),
    };
    let max_len = a.max_len.unwrap_or(cfg.model.max_target_len);
    let all = load_samples(&a.data.data)?;
    let mut inputs = data_inputs(&a.data);
    inputs.push(a.run.join(CHECKPOINT_FILE));
    inputs.push(a.run.join(VOCAB_FILE));
    out_dir(&a.out)?;
    let config = format!("{}split = {}\nbeam = {:?}\nmax_len = {max_len}\n", cfg.to_flat_string(), a.split, a.beam);
    let manifest =
        RunManifest::start("generate", config, cfg.train.seed, &paths(&inputs))?;
    manifest.write(&a.out)?;

    let vocab = Vocabulary::read_json(File::open(a.run.join(VOCAB_FILE))?)?;
    let model = LongitudinalModel::load_path(&a.run.join(CHECKPOINT_FILE), DType::F32)?;
    let samples = in_split(&all, &a.split)?;
    let data = prepare(&a.data, &samples, &vocab, &cfg)?;
    let generated = generate_all(&model, &data, mode, max_len, a.batch_size)?;

    let mut buf = Vec::new();
    for (s, g) in data.iter().zip(&generated) {
        let line = GeneratedLine {
            id: &s.id,
            generated: vocab.decode(g)?,
            reference: &s.target_text,
            previous: &s.previous_text,
            tokens: g.ids.len(),
        };
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    let out = a.out.join("generated.jsonl");
    write_atomic(&out, &buf)?;
    manifest.finish(&a.out, vec![out])?;
    println!("generated {} reports for split {}", generated.len(), a.split);
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    require(&a.input)?;
    let mut inputs = vec![a.input.as_path()];
    if let Some(r) = &a.labeler_rules {
        require(r)?;
        inputs.push(r);
    }
    out_dir(&a.out)?;
    let manifest = RunManifest::start("evaluate", String::new(), 0, &inputs)?;
    manifest.write(&a.out)?;

    let records = read_eval_records(File::open(&a.input)?).with_context(|| format!("reading {}", a.input.display()))?;
    let labeler = labeler(a.labeler_rules.as_deref())?;
    let metrics = score(&records, &labeler)?;
    let consistency = consistency_from_records(&records, &labeler)?;

    let outputs = vec![a.out.join("metrics.json"), a.out.join("consistency.csv")];
    write_json(&outputs[0], &metrics)?;
    write_with(&outputs[1], |w| consistency.write_csv(w))?;
    manifest.finish(&a.out, outputs)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = resolve_config(&a.config, RunConfig::default())?;
    let all = load_samples(&a.data.data)?;
    let mut inputs = data_inputs(&a.data);
    if let Some(r) = &a.labeler_rules {
        inputs.push(r.clone());
    }
    out_dir(&a.out)?;
    let manifest =
        RunManifest::start("ablate", cfg.to_flat_string(), cfg.train.seed, &paths(&inputs))?;
    manifest.write(&a.out)?;

    let train_samples = in_split(&all, &a.train_split)?;
    let eval_samples = in_split(&all, &a.eval_split)?;
    if train_samples.is_empty() || eval_samples.is_empty() {
        bail!("splits `{}` and `{}` both need samples", a.train_split, a.eval_split);
    }
    let vocab = build_vocab(&train_samples, cfg.train.min_freq)?;
    let train_set = prepare(&a.data, &train_samples, &vocab, &cfg)?;
    let eval_set = prepare(&a.data, &eval_samples, &vocab, &cfg)?;
    let labeler = labeler(a.labeler_rules.as_deref())?;
    let rows = run_ablation(&Variant::ALL, &train_set, &eval_set, &cfg.model, &cfg.train, &vocab, &labeler)?;

    let outputs = vec![a.out.join("ablation.csv"), a.out.join("ablation.json")];
    write_with(&outputs[0], |w| write_ablation_csv(&rows, w))?;
    write_json(&outputs[1], &rows)?;
    let table = fs::read_to_string(&outputs[0])?;
    manifest.finish(&a.out, outputs)?;
    print!("{table}");
    Ok(())
}

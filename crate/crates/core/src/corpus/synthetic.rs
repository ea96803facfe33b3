//! Seeded synthetic MIMIC-style metadata, reports and rasters for desk-scale runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::GrayImage;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ReportStore, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::evaluation::{Condition, LabelValue};

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPhrases {
    pub condition: Condition,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub uncertain: Vec<String>,
}

/// Controls the sentence inventory of generated reports.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabSpec {
    pub conditions: Vec<ConditionPhrases>,
    /// Label-free sentences mixed into every findings section.
    pub normal_sentences: Vec<String>,
    /// Appended verbatim to every findings section.
    pub forced_sentences: Vec<String>,
    /// How many conditions each patient's reports talk about.
    pub conditions_per_patient: usize,
    /// Probability that a condition's label changes between consecutive visits.
    pub label_change_rate: f64,
    /// Probability that a report has no findings section.
    pub findings_absent_rate: f64,
}

fn phrases(c: Condition, pos: &[&str], neg: &[&str], unc: &[&str]) -> ConditionPhrases {
    let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
    ConditionPhrases { condition: c, positive: own(pos), negative: own(neg), uncertain: own(unc) }
}

impl Default for VocabSpec {
    fn default() -> Self {
        use Condition::*;
        Self {
            conditions: vec![
                phrases(Cardiomegaly, &["the cardiac silhouette is enlarged", "there is cardiomegaly"], &["no cardiomegaly"], &["possible mild cardiomegaly"]),
                phrases(PleuralEffusion, &["there is a small left pleural effusion", "small bilateral pleural effusions are present"], &["no pleural effusion"], &["possible small right pleural effusion"]),
                phrases(Pneumothorax, &["there is a small right apical pneumothorax"], &["no pneumothorax"], &["possible tiny left apical pneumothorax"]),
                phrases(Edema, &["there is mild pulmonary edema", "mild vascular congestion is seen"], &["no pulmonary edema"], &["possible mild interstitial edema"]),
                phrases(Atelectasis, &["there is bibasilar atelectasis", "left basilar atelectasis is present"], &["no atelectasis"], &["the basilar opacity may reflect atelectasis"]),
                phrases(Consolidation, &["there is right lower lobe consolidation"], &["no focal consolidation"], &["possible left lower lobe consolidation"]),
                phrases(SupportDevices, &["a left chest wall pacemaker is in place", "a right picc line terminates in the svc"], &["no support devices are seen"], &[]),
                phrases(LungLesion, &["there is a right upper lobe nodule"], &["no suspicious nodule"], &["possible nodule in the left mid lung"]),
            ],
            normal_sentences: [
                "the lungs are clear",
                "heart size is normal",
                "the mediastinal contours are normal",
                "the hilar contours are unremarkable",
                "the osseous structures are intact",
                "pa and lateral views of the chest were obtained",
                "comparison is made to the prior study",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            forced_sentences: Vec::new(),
            conditions_per_patient: 3,
            label_change_rate: 0.25,
            findings_absent_rate: 0.0,
        }
    }
}

/// Generated fixtures in the formats `parse_metadata` consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub metadata_csv: String,
    pub reports: ReportStore,
    pub manifest: SplitManifest,
    /// Every image id referenced by the metadata, in table order.
    pub image_ids: Vec<String>,
}

impl SyntheticCorpus {
    /// Deterministic grayscale raster for an image id.
    pub fn render_image(&self, image_id: &str, side: u32) -> GrayImage {
        render_image(self.seed, image_id, side)
    }

    /// Writes `metadata.csv`, `reports.csv`, `splits.csv` and `images/<id>.png`.
    pub fn write_to(&self, dir: &Path, image_side: u32) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::write(dir.join("metadata.csv"), &self.metadata_csv)?;
        self.reports.write_csv(std::fs::File::create(dir.join("reports.csv"))?)?;
        self.manifest.write_csv(std::fs::File::create(dir.join("splits.csv"))?)?;
        for id in &self.image_ids {
            let path = dir.join("images").join(format!("{id}.png"));
            self.render_image(id, image_side)
                .save(&path)
                .map_err(|e| Error::Image { path, reason: e.to_string() })?;
        }
        Ok(())
    }
}

pub fn render_image(seed: u64, image_id: &str, side: u32) -> GrayImage {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(image_id.as_bytes())
        .finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    let (cx, cy) = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
    GrayImage::from_fn(side, side, |x, y| {
        let (u, v) = (x as f64 / side as f64 - cx, y as f64 / side as f64 - cy);
        let base = 200.0 * (-(u * u + v * v) * 6.0).exp();
        image::Luma([(base + rng.random_range(0.0..55.0)) as u8])
    })
}

fn sample_visit_count(rng: &mut ChaCha8Rng, histogram: &[(usize, f64)], total: f64) -> usize {
    let mut x = rng.random_range(0.0..total);
    for &(count, w) in histogram {
        if x < w {
            return count;
        }
        x -= w;
    }
    histogram.last().map(|h| h.0).unwrap_or(1)
}

fn pick<'a>(rng: &mut ChaCha8Rng, v: &'a [String]) -> Option<&'a str> {
    v.choose(rng).map(String::as_str)
}

/// Generates `n_patients` patients whose visit counts follow the weights in
/// `visit_histogram` (visit count → weight). Output is a pure function of
/// the arguments.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_patients: usize,
    visit_histogram: &BTreeMap<usize, f64>,
    vocab: &VocabSpec,
) -> Result<SyntheticCorpus> {
    if n_patients == 0 {
        return Err(Error::InvalidInput("n_patients must be at least 1".into()));
    }
    let histogram: Vec<(usize, f64)> = visit_histogram
        .iter()
        .filter(|(&k, &w)| k > 0 && w > 0.0 && w.is_finite())
        .map(|(&k, &w)| (k, w))
        .collect();
    if histogram.is_empty() {
        return Err(Error::InvalidInput("visit histogram has no positive weights".into()));
    }
    let total: f64 = histogram.iter().map(|h| h.1).sum();
    generate(seed, n_patients, |rng, _| sample_visit_count(rng, &histogram, total), vocab)
}

/// Like [`generate_synthetic_corpus`] but with exact stratum sizes
/// (visit count → number of patients), strata in ascending order.
pub fn generate_synthetic_corpus_exact(
    seed: u64,
    patients_per_count: &BTreeMap<usize, usize>,
    vocab: &VocabSpec,
) -> Result<SyntheticCorpus> {
    let counts: Vec<usize> = patients_per_count
        .iter()
        .filter(|(&k, _)| k > 0)
        .flat_map(|(&k, &n)| std::iter::repeat_n(k, n))
        .collect();
    if counts.is_empty() {
        return Err(Error::InvalidInput("visit histogram has no patients".into()));
    }
    generate(seed, counts.len(), |_, p| counts[p], vocab)
}

fn generate<F>(seed: u64, n_patients: usize, mut visit_count: F, vocab: &VocabSpec) -> Result<SyntheticCorpus>
where
    F: FnMut(&mut ChaCha8Rng, usize) -> usize,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut metadata = String::from("patient_id,study_id,study_date,study_time,image_ids,views\n");
    let mut reports = BTreeMap::new();
    let mut manifest = BTreeMap::new();
    let mut image_ids = Vec::new();
    let base_date = chrono::NaiveDate::from_ymd_opt(2150, 1, 1).expect("valid date");
    let mut study_counter = 0usize;

    for p in 0..n_patients {
        let pid = format!("p{:05}", 10_000 + p);
        let n_visits = visit_count(&mut rng, p);
        let split = match rng.random_range(0..10) {
            0 => Split::Validation,
            1 => Split::Test,
            _ => Split::Train,
        };
        manifest.insert(pid.clone(), split);

        let k = vocab.conditions_per_patient.min(vocab.conditions.len());
        let mut chosen: Vec<usize> = (0..vocab.conditions.len()).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(k);
        chosen.sort_unstable();
        let mut states: Vec<LabelValue> = chosen.iter().map(|&c| random_state(&mut rng, &vocab.conditions[c])).collect();

        let mut date = base_date + chrono::Days::new(rng.random_range(0..3650));
        for v in 0..n_visits {
            if v > 0 {
                date = date + chrono::Days::new(rng.random_range(1..400));
                for (state, &c) in states.iter_mut().zip(&chosen) {
                    if rng.random_bool(vocab.label_change_rate.clamp(0.0, 1.0)) {
                        *state = random_state(&mut rng, &vocab.conditions[c]);
                    }
                }
            }
            study_counter += 1;
            let sid = format!("s{:08}", 50_000_000 + study_counter);
            let time = format!(
                "{:02}{:02}{:02}.{:03}",
                rng.random_range(0..24),
                rng.random_range(0..60),
                rng.random_range(0..60),
                rng.random_range(0..1000)
            );
            let (imgs, views) = if rng.random_bool(0.5) {
                (vec![format!("{sid}_0")], vec!["PA"])
            } else {
                (vec![format!("{sid}_0"), format!("{sid}_1")], vec!["LATERAL", "AP"])
            };
            let _ = writeln!(
                metadata,
                "{pid},{sid},{},{time},{},{}",
                date.format("%Y%m%d"),
                imgs.join("|"),
                views.join("|")
            );
            image_ids.extend(imgs);

            let mut sentences: Vec<String> = Vec::new();
            let n_normal = rng.random_range(1..=2.min(vocab.normal_sentences.len()).max(1));
            let mut normals = vocab.normal_sentences.clone();
            normals.shuffle(&mut rng);
            sentences.extend(normals.into_iter().take(n_normal));
            for (state, &c) in states.iter().zip(&chosen) {
                let ph = &vocab.conditions[c];
                let list = match state {
                    LabelValue::Positive => &ph.positive,
                    LabelValue::Negative => &ph.negative,
                    LabelValue::Uncertain => &ph.uncertain,
                    LabelValue::Unmentioned => continue,
                };
                if let Some(s) = pick(&mut rng, list) {
                    sentences.push(s.to_string());
                }
            }
            sentences.extend(vocab.forced_sentences.iter().cloned());
            let findings: String = sentences.iter().map(|s| format!("{}. ", capitalize(s))).collect();
            let impression = if states.contains(&LabelValue::Positive) {
                "Findings as described above."
            } else {
                "No acute cardiopulmonary process."
            };
            let report = if rng.random_bool(vocab.findings_absent_rate.clamp(0.0, 1.0)) {
                format!("EXAMINATION: CHEST RADIOGRAPH.\n\nIMPRESSION: {impression}\n")
            } else {
                format!("EXAMINATION: CHEST RADIOGRAPH.\n\nFINDINGS: {}\n\nIMPRESSION: {impression}\n", findings.trim_end())
            };
            reports.insert(sid, report);
        }
    }

    Ok(SyntheticCorpus {
        seed,
        metadata_csv: metadata,
        reports: ReportStore(reports.into_iter().collect()),
        manifest: SplitManifest(manifest),
        image_ids,
    })
}

fn random_state(rng: &mut ChaCha8Rng, ph: &ConditionPhrases) -> LabelValue {
    let mut options = Vec::with_capacity(3);
    if !ph.positive.is_empty() {
        options.push(LabelValue::Positive);
    }
    if !ph.negative.is_empty() {
        options.push(LabelValue::Negative);
    }
    if !ph.uncertain.is_empty() {
        options.push(LabelValue::Uncertain);
    }
    options.choose(rng).copied().unwrap_or(LabelValue::Unmentioned)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let h = BTreeMap::from([(2, 1.0), (3, 1.0)]);
        let a = generate_synthetic_corpus(7, 20, &h, &VocabSpec::default()).unwrap();
        let b = generate_synthetic_corpus(7, 20, &h, &VocabSpec::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.render_image(&a.image_ids[0], 32), b.render_image(&b.image_ids[0], 32));
        let c = generate_synthetic_corpus(8, 20, &h, &VocabSpec::default()).unwrap();
        assert_ne!(a.metadata_csv, c.metadata_csv);
    }

    #[test]
    fn rejects_empty_histogram_and_zero_patients() {
        assert!(generate_synthetic_corpus(1, 5, &BTreeMap::new(), &VocabSpec::default()).is_err());
        assert!(generate_synthetic_corpus(1, 5, &BTreeMap::from([(2, 0.0)]), &VocabSpec::default()).is_err());
        assert!(generate_synthetic_corpus(1, 0, &BTreeMap::from([(2, 1.0)]), &VocabSpec::default()).is_err());
    }
}

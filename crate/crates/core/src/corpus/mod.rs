//! Longitudinal dataset construction: visit ingestion, findings extraction,
//! chronological ordering, consecutive-visit pairing and split assignment.

mod synthetic;

pub use synthetic::{generate_synthetic_corpus, generate_synthetic_corpus_exact, ConditionPhrases, SyntheticCorpus, VocabSpec};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "validate" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

/// One imaging study of one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub patient_id: String,
    pub study_id: String,
    pub study_datetime: NaiveDateTime,
    pub image_refs: Vec<String>,
    /// View position per image (e.g. `PA`, `LATERAL`); empty when unknown.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub views: Vec<String>,
    pub report_text: String,
    pub findings_text: Option<String>,
}

impl VisitRecord {
    /// First frontal image when view metadata is present, otherwise the first image.
    pub fn primary_image(&self) -> &str {
        if self.views.len() == self.image_refs.len() {
            let frontal = self
                .views
                .iter()
                .position(|v| matches!(v.trim().to_ascii_uppercase().as_str(), "PA" | "AP"));
            if let Some(i) = frontal {
                return &self.image_refs[i];
            }
        }
        &self.image_refs[0]
    }

    pub fn has_findings(&self) -> bool {
        self.findings_text.is_some()
    }
}

/// A (previous, current) pair of adjacent eligible visits of one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalSample {
    pub patient_id: String,
    pub prev: VisitRecord,
    pub curr: VisitRecord,
    pub split: Option<Split>,
}

impl LongitudinalSample {
    pub fn id(&self) -> String {
        format!("{}/{}", self.patient_id, self.curr.study_id)
    }

    pub fn target_findings(&self) -> &str {
        self.curr.findings_text.as_deref().unwrap_or_default()
    }

    pub fn prev_findings(&self) -> &str {
        self.prev.findings_text.as_deref().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub patients: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Number of eligible visits → number of patients.
    pub visits_per_patient: BTreeMap<usize, usize>,
    pub patients_with_ge2_visits: usize,
    pub total_samples: usize,
    pub per_split: BTreeMap<Split, SplitCounts>,
}

impl CorpusStats {
    /// Recomputes per-split patient and sample counts from assigned samples.
    pub fn record_splits(&mut self, samples: &[LongitudinalSample]) {
        let mut patients: BTreeMap<Split, std::collections::BTreeSet<&str>> = BTreeMap::new();
        let mut counts: BTreeMap<Split, SplitCounts> = BTreeMap::new();
        for s in samples {
            if let Some(split) = s.split {
                patients.entry(split).or_default().insert(&s.patient_id);
                counts.entry(split).or_default().samples += 1;
            }
        }
        for (split, ids) in patients {
            counts.entry(split).or_default().patients = ids.len();
        }
        self.per_split = counts;
    }
}

/// A row-level ingestion problem. The row is skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    /// 1-based line number in the metadata table, header included.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct ParsedMetadata {
    pub records: Vec<VisitRecord>,
    pub errors: Vec<RowError>,
    /// Studies whose report was not found in the report store.
    pub missing_reports: Vec<String>,
}

/// Reports keyed by study id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReportStore(pub HashMap<String, String>);

impl ReportStore {
    /// Loads either a directory of `<study_id>.txt` files or a two-column
    /// CSV (`study_id,report`).
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let mut map = HashMap::new();
            for entry in std::fs::read_dir(path)? {
                let entry = entry?;
                let p = entry.path();
                if p.extension().and_then(|e| e.to_str()) == Some("txt") {
                    if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                        map.insert(stem.to_string(), std::fs::read_to_string(&p)?);
                    }
                }
            }
            Ok(Self(map))
        } else {
            Self::from_csv(std::fs::File::open(path)?)
        }
    }

    pub fn from_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut map = HashMap::new();
        for row in rdr.records() {
            let row = row?;
            if row.len() < 2 {
                return Err(Error::InvalidInput("report CSV rows need study_id and report columns".into()));
            }
            map.insert(row[0].trim().to_string(), row[1].to_string());
        }
        Ok(Self(map))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["study_id", "report"])?;
        let mut keys: Vec<&String> = self.0.keys().collect();
        keys.sort();
        for k in keys {
            wtr.write_record([k.as_str(), self.0[k].as_str()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn findings_heading() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bFINDINGS\s*:").expect("valid regex"))
}

fn section_heading() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b[A-Z][A-Z ]*[A-Z]\s*:").expect("valid regex"))
}

/// Returns the findings section: text after a case-insensitive `FINDINGS:`
/// heading up to the next ALL-CAPS heading followed by a colon. Whitespace is
/// collapsed. `None` when there is no heading or the section is empty.
pub fn extract_findings(report_text: &str) -> Option<String> {
    let start = findings_heading().find(report_text)?.end();
    let rest = &report_text[start..];
    let end = section_heading().find(rest).map_or(rest.len(), |m| m.start());
    let body = rest[..end].split_whitespace().collect::<Vec<_>>().join(" ");
    (!body.is_empty()).then_some(body)
}

/// Parses `YYYYMMDD` plus `HHMMSS[.ffff]`. The integer part of the time may
/// have dropped leading zeros (`5204.0` is 00:52:04); fractions are truncated.
pub fn parse_study_datetime(date: &str, time: &str) -> Result<NaiveDateTime> {
    let date = date.trim();
    let d = NaiveDate::parse_from_str(date, "%Y%m%d")
        .map_err(|e| Error::InvalidInput(format!("bad study_date `{date}`: {e}")))?;
    let time = time.trim();
    if time.is_empty() {
        return Err(Error::InvalidInput("missing study_time".into()));
    }
    let int_part = time.split('.').next().unwrap_or_default();
    if int_part.is_empty() || int_part.len() > 6 || !int_part.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::InvalidInput(format!("bad study_time `{time}`")));
    }
    let padded = format!("{int_part:0>6}");
    let t = NaiveTime::parse_from_str(&padded, "%H%M%S")
        .map_err(|e| Error::InvalidInput(format!("bad study_time `{time}`: {e}")))?;
    Ok(d.and_time(t))
}

/// Reads the metadata table and joins it with reports.
///
/// Required columns: `patient_id`, `study_id`, `study_date`, `study_time`,
/// `image_ids` (pipe-separated). An optional `views` column holds
/// pipe-separated view positions aligned with `image_ids`.
pub fn parse_metadata<R: Read>(metadata: R, reports: &ReportStore) -> Result<ParsedMetadata> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(metadata);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let required = ["patient_id", "study_id", "study_date", "study_time", "image_ids"];
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(required) {
        *slot = col(name).ok_or_else(|| Error::InvalidInput(format!("metadata table lacks column `{name}`")))?;
    }
    let views_col = col("views");

    let mut out = ParsedMetadata::default();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        let field = |j: usize| row.get(j).map(str::trim).unwrap_or_default();
        let patient_id = field(idx[0]);
        let study_id = field(idx[1]);
        if patient_id.is_empty() || study_id.is_empty() {
            out.errors.push(RowError { line, message: "missing patient_id or study_id".into() });
            continue;
        }
        let study_datetime = match parse_study_datetime(field(idx[2]), field(idx[3])) {
            Ok(dt) => dt,
            Err(e) => {
                out.errors.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        let image_refs: Vec<String> = split_pipe(field(idx[4]));
        if image_refs.is_empty() {
            out.errors.push(RowError { line, message: format!("study {study_id} has no images") });
            continue;
        }
        let views = views_col.map(|j| split_pipe(field(j))).unwrap_or_default();
        let Some(report_text) = reports.0.get(study_id) else {
            log::warn!("no report for study {study_id}; skipping");
            out.missing_reports.push(study_id.to_string());
            continue;
        };
        out.records.push(VisitRecord {
            patient_id: patient_id.to_string(),
            study_id: study_id.to_string(),
            study_datetime,
            image_refs,
            views,
            findings_text: extract_findings(report_text),
            report_text: report_text.clone(),
        });
    }
    Ok(out)
}

fn split_pipe(s: &str) -> Vec<String> {
    s.split('|').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}

/// Sorts one patient's visits by `(study_datetime, study_id)`.
pub fn chronological_sort(mut visits: Vec<VisitRecord>) -> Result<Vec<VisitRecord>> {
    if let Some(first) = visits.first() {
        let pid = first.patient_id.clone();
        if let Some(other) = visits.iter().find(|v| v.patient_id != pid) {
            return Err(Error::InvalidInput(format!(
                "chronological_sort got mixed patients `{pid}` and `{}`",
                other.patient_id
            )));
        }
    }
    visits.sort_by(|a, b| {
        a.study_datetime
            .cmp(&b.study_datetime)
            .then_with(|| a.study_id.cmp(&b.study_id))
    });
    Ok(visits)
}

/// Groups records by patient and sorts each patient's visits.
pub fn group_by_patient(records: Vec<VisitRecord>) -> Result<BTreeMap<String, Vec<VisitRecord>>> {
    let mut grouped: BTreeMap<String, Vec<VisitRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.patient_id.clone()).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(pid, visits)| Ok((pid, chronological_sort(visits)?)))
        .collect()
}

/// Emits every adjacent pair of eligible (findings-present) visits. A patient
/// with `n` eligible visits contributes `n - 1` samples.
pub fn build_longitudinal_pairs(
    visits_by_patient: &BTreeMap<String, Vec<VisitRecord>>,
) -> (Vec<LongitudinalSample>, CorpusStats) {
    let mut samples = Vec::new();
    let mut stats = CorpusStats::default();
    for (pid, visits) in visits_by_patient {
        let eligible: Vec<&VisitRecord> = visits.iter().filter(|v| v.has_findings()).collect();
        if eligible.is_empty() {
            continue;
        }
        *stats.visits_per_patient.entry(eligible.len()).or_default() += 1;
        if eligible.len() >= 2 {
            stats.patients_with_ge2_visits += 1;
        }
        for w in eligible.windows(2) {
            samples.push(LongitudinalSample {
                patient_id: pid.clone(),
                prev: w[0].clone(),
                curr: w[1].clone(),
                split: None,
            });
        }
    }
    stats.total_samples = samples.len();
    (samples, stats)
}

/// Patient → split mapping (the official split table).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitManifest(pub BTreeMap<String, Split>);

impl SplitManifest {
    /// Reads `patient_id,split` rows. A patient listed twice with different
    /// splits is an error.
    pub fn from_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut map = BTreeMap::new();
        for row in rdr.records() {
            let row = row?;
            let (Some(pid), Some(split)) = (row.get(0), row.get(1)) else {
                return Err(Error::InvalidInput("split manifest rows need patient_id and split".into()));
            };
            Self::insert_checked(&mut map, pid.trim(), split.parse()?)?;
        }
        Ok(Self(map))
    }

    fn insert_checked(map: &mut BTreeMap<String, Split>, pid: &str, split: Split) -> Result<()> {
        match map.get(pid) {
            Some(&existing) if existing != split => Err(Error::InvalidInput(format!(
                "patient {pid} listed in both {existing} and {split}"
            ))),
            _ => {
                map.insert(pid.to_string(), split);
                Ok(())
            }
        }
    }

    pub fn from_pairs<'a, I: IntoIterator<Item = (&'a str, Split)>>(pairs: I) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (pid, split) in pairs {
            Self::insert_checked(&mut map, pid, split)?;
        }
        Ok(Self(map))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["patient_id", "split"])?;
        for (pid, split) in &self.0 {
            wtr.write_record([pid.as_str(), split.as_str()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Sets each sample's split from the manifest. Patients not in the manifest
/// take `fallback` when given, otherwise the call fails listing them.
pub fn assign_splits(
    mut samples: Vec<LongitudinalSample>,
    manifest: &SplitManifest,
    fallback: Option<Split>,
) -> Result<Vec<LongitudinalSample>> {
    let mut missing = std::collections::BTreeSet::new();
    for s in &mut samples {
        match manifest.0.get(&s.patient_id).copied().or(fallback) {
            Some(split) => s.split = Some(split),
            None => {
                missing.insert(s.patient_id.clone());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingSplit(missing.into_iter().collect()));
    }
    Ok(samples)
}

pub fn write_samples_jsonl<W: Write>(samples: &[LongitudinalSample], mut w: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_jsonl<R: Read>(r: R) -> Result<Vec<LongitudinalSample>> {
    let mut out = Vec::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

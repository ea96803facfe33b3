//! Report-quality scoring: text-overlap metrics, clinical-efficacy metrics
//! over 14 labels, and the longitudinal consistency analysis.

mod clinical;
mod labels;
mod metrics;

pub use clinical::{
    ce_confusion, ce_metrics, longitudinal_label_consistency, CeScores, Confusion, ConsistencyCounts,
    ConsistencyReport,
};
pub use labels::{Condition, LabelValue, LabelVector, Labeler, StubLabeler};
pub use metrics::{bleu, clipped_ngram_counts, lcs_len, meteor, meteor_corpus, rouge_l, rouge_l_corpus, ROUGE_L_BETA};

use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// One generated report paired with its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub generated: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub ce_accuracy: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
    pub samples: usize,
}

impl MetricReport {
    /// Values in the column order BL-1..4, METEOR, ROUGE-L, A, P, R, F-1.
    pub fn row(&self) -> [f64; 10] {
        [
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
            self.bleu_4,
            self.meteor,
            self.rouge_l,
            self.ce_accuracy,
            self.ce_precision,
            self.ce_recall,
            self.ce_f1,
        ]
    }
}

/// Reads evaluation JSONL. Every line must carry `id`, `generated` and `reference`.
pub fn read_eval_records<R: Read>(r: R) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("evaluation line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Scores generated against reference text with every metric.
pub fn evaluate<L: Labeler + ?Sized>(records: &[EvalRecord], labeler: &L) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let cands: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.generated)).collect();
    let refs: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.reference)).collect();
    let mut bleus = [0.0; 4];
    for (n, slot) in bleus.iter_mut().enumerate() {
        *slot = bleu(&cands, &refs, n + 1)?;
    }
    let pred: Vec<LabelVector> = records.iter().map(|r| labeler.label(&r.generated)).collect();
    let truth: Vec<LabelVector> = records.iter().map(|r| labeler.label(&r.reference)).collect();
    let ce = ce_metrics(&pred, &truth)?;
    Ok(MetricReport {
        bleu_1: bleus[0],
        bleu_2: bleus[1],
        bleu_3: bleus[2],
        bleu_4: bleus[3],
        meteor: meteor_corpus(&cands, &refs)?,
        rouge_l: rouge_l_corpus(&cands, &refs)?,
        ce_accuracy: ce.accuracy,
        ce_precision: ce.precision,
        ce_recall: ce.recall,
        ce_f1: ce.f1,
        samples: records.len(),
    })
}

/// Label consistency over records that carry a previous report.
pub fn consistency_from_records<L: Labeler + ?Sized>(records: &[EvalRecord], labeler: &L) -> Result<ConsistencyReport> {
    let mut prev = Vec::new();
    let mut truth = Vec::new();
    let mut gen = Vec::new();
    for r in records {
        if let Some(p) = &r.previous {
            prev.push(labeler.label(p));
            truth.push(labeler.label(&r.reference));
            gen.push(labeler.label(&r.generated));
        }
    }
    longitudinal_label_consistency(&prev, &truth, &gen)
}

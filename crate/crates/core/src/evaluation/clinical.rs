//! Clinical-efficacy scores over labeler outputs and the longitudinal
//! label-consistency breakdown.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::labels::{Condition, LabelValue, LabelVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Binarizes positive-vs-rest and micro-averages over all conditions and samples.
pub fn ce_confusion(predicted: &[LabelVector], truth: &[LabelVector]) -> Result<Confusion> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predicted label vectors but {} reference",
            predicted.len(),
            truth.len()
        )));
    }
    let mut c = Confusion::default();
    for (p, t) in predicted.iter().zip(truth) {
        for (pv, tv) in p.0.iter().zip(&t.0) {
            match (*pv == LabelValue::Positive, *tv == LabelValue::Positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(c)
}

pub fn ce_metrics(predicted: &[LabelVector], truth: &[LabelVector]) -> Result<CeScores> {
    let c = ce_confusion(predicted, truth)?;
    let total = c.tp + c.fp + c.fn_ + c.tn;
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    // an empty batch has nothing wrong in it
    let accuracy = if total == 0 { 1.0 } else { ratio(c.tp + c.tn, total) };
    Ok(CeScores { accuracy, precision, recall, f1 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyCounts {
    /// Triples where the previous label equals the current reference label.
    pub same: usize,
    /// ... and the generated label matches the reference.
    pub same_matched: usize,
    /// Triples where the previous label differs from the current reference label.
    pub changed: usize,
    /// ... and the generated label does not match the reference.
    pub changed_wrong: usize,
}

impl ConsistencyCounts {
    fn add(&mut self, other: &ConsistencyCounts) {
        self.same += other.same;
        self.same_matched += other.same_matched;
        self.changed += other.changed;
        self.changed_wrong += other.changed_wrong;
    }

    /// Fraction of unchanged-label triples the generator got right.
    pub fn same_match_rate(&self) -> Option<f64> {
        (self.same > 0).then(|| self.same_matched as f64 / self.same as f64)
    }

    /// Fraction of changed-label triples the generator got wrong.
    pub fn changed_error_rate(&self) -> Option<f64> {
        (self.changed > 0).then(|| self.changed_wrong as f64 / self.changed as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub overall: ConsistencyCounts,
    pub per_condition: BTreeMap<Condition, ConsistencyCounts>,
}

/// Considers only (sample, condition) cells mentioned in both the previous
/// and the current reference report.
pub fn longitudinal_label_consistency(
    prev: &[LabelVector],
    truth_curr: &[LabelVector],
    gen_curr: &[LabelVector],
) -> Result<ConsistencyReport> {
    if prev.len() != truth_curr.len() || prev.len() != gen_curr.len() {
        return Err(Error::InvalidInput("label consistency needs aligned triples".into()));
    }
    let mut report = ConsistencyReport::default();
    for ((p, t), g) in prev.iter().zip(truth_curr).zip(gen_curr) {
        for cond in Condition::ALL {
            let (pv, tv, gv) = (p.get(cond), t.get(cond), g.get(cond));
            if !pv.is_mentioned() || !tv.is_mentioned() {
                continue;
            }
            let entry = report.per_condition.entry(cond).or_default();
            if pv == tv {
                entry.same += 1;
                entry.same_matched += usize::from(gv == tv);
            } else {
                entry.changed += 1;
                entry.changed_wrong += usize::from(gv != tv);
            }
        }
    }
    let mut overall = ConsistencyCounts::default();
    for c in report.per_condition.values() {
        overall.add(c);
    }
    report.overall = overall;
    Ok(report)
}

impl ConsistencyReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["condition", "same", "same_matched", "same_match_rate", "changed", "changed_wrong", "changed_error_rate"])?;
        let fmt_rate = |r: Option<f64>| r.map(|v| format!("{v:.6}")).unwrap_or_default();
        let rows = self
            .per_condition
            .iter()
            .map(|(c, k)| (c.name().to_string(), k))
            .chain(std::iter::once(("ALL".to_string(), &self.overall)));
        for (name, k) in rows {
            wtr.write_record([
                name,
                k.same.to_string(),
                k.same_matched.to_string(),
                fmt_rate(k.same_match_rate()),
                k.changed.to_string(),
                k.changed_wrong.to_string(),
                fmt_rate(k.changed_error_rate()),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(values: &[(Condition, LabelValue)]) -> LabelVector {
        let mut v = LabelVector::default();
        for &(c, x) in values {
            v.set(c, x);
        }
        v
    }

    #[test]
    fn identical_labels_score_one() {
        let a = vec![lv(&[(Condition::Edema, LabelValue::Positive)]), lv(&[])];
        let s = ce_metrics(&a, &a).unwrap();
        assert_eq!((s.accuracy, s.precision, s.recall, s.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predicted_positives() {
        let truth = vec![lv(&[(Condition::Edema, LabelValue::Positive)])];
        let pred = vec![lv(&[(Condition::Edema, LabelValue::Negative)])];
        let s = ce_metrics(&pred, &truth).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(ce_metrics(&[LabelVector::default()], &[]).is_err());
    }

    #[test]
    fn identical_triples_match_fully() {
        let a = vec![lv(&[(Condition::Pneumothorax, LabelValue::Negative), (Condition::Edema, LabelValue::Positive)])];
        let r = longitudinal_label_consistency(&a, &a, &a).unwrap();
        assert_eq!(r.overall.same, 2);
        assert_eq!(r.overall.same_match_rate(), Some(1.0));
        assert_eq!(r.overall.changed_error_rate(), None);
    }
}

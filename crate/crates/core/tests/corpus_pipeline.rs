mod common;

use std::collections::BTreeMap;

use prefill_core::corpus::{
    assign_splits, build_longitudinal_pairs, generate_synthetic_corpus, generate_synthetic_corpus_exact,
    group_by_patient, parse_metadata, read_samples_jsonl, write_samples_jsonl, LongitudinalSample, ReportStore,
    SplitManifest, SyntheticCorpus, VocabSpec,
};
use prefill_core::evaluation::{Condition, LabelValue, Labeler, StubLabeler};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairs_of(corpus: &SyntheticCorpus) -> Vec<LongitudinalSample> {
    let parsed = parse_metadata(corpus.metadata_csv.as_bytes(), &corpus.reports).unwrap();
    assert!(parsed.errors.is_empty() && parsed.missing_reports.is_empty());
    build_longitudinal_pairs(&group_by_patient(parsed.records).unwrap()).0
}

fn ids(samples: &[LongitudinalSample]) -> Vec<(String, String, String)> {
    samples.iter().map(|s| (s.patient_id.clone(), s.prev.study_id.clone(), s.curr.study_id.clone())).collect()
}

#[test]
fn table_one_strata_give_37583_samples() {
    let strata = BTreeMap::from([(2, 10_490), (3, 5_079), (4, 3_021), (5, 1_968)]);
    let corpus = generate_synthetic_corpus_exact(11, &strata, &VocabSpec::default()).unwrap();
    let parsed = parse_metadata(corpus.metadata_csv.as_bytes(), &corpus.reports).unwrap();
    let (samples, stats) = build_longitudinal_pairs(&group_by_patient(parsed.records).unwrap());
    assert_eq!(samples.len(), 37_583);
    assert_eq!(stats.total_samples, 37_583);
    assert_eq!(stats.visits_per_patient, strata);
    assert_eq!(stats.patients_with_ge2_visits, 20_558);
    let expected: usize = strata.iter().map(|(n, p)| (n - 1) * p).sum();
    assert_eq!(expected, 37_583);
}

#[test]
fn random_corpora_match_brute_force_pairing() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..100 {
        let mut hist = BTreeMap::new();
        for n in 1..=5 {
            if rng.random_bool(0.7) {
                hist.insert(n, rng.random_range(0.1..1.0));
            }
        }
        hist.entry(2).or_insert(0.5);
        let vocab = VocabSpec { findings_absent_rate: rng.random_range(0.0..0.3), ..VocabSpec::default() };
        let corpus = generate_synthetic_corpus(case, rng.random_range(1..25), &hist, &vocab).unwrap();
        let got = ids(&pairs_of(&corpus));
        assert_eq!(got, common::brute_force_pairs(&corpus.metadata_csv, &corpus.reports.0), "case {case}");
    }
}

#[test]
fn single_and_triple_visit_mix() {
    let hist = BTreeMap::from([(1, 0.5), (3, 0.5)]);
    let corpus = generate_synthetic_corpus(3, 10, &hist, &VocabSpec::default()).unwrap();
    let parsed = parse_metadata(corpus.metadata_csv.as_bytes(), &corpus.reports).unwrap();
    let groups = group_by_patient(parsed.records).unwrap();
    let expected: usize = groups.values().map(|v| v.len().saturating_sub(1)).sum();
    let (samples, _) = build_longitudinal_pairs(&groups);
    assert_eq!(samples.len(), expected);
    for s in &samples {
        assert!(s.prev.study_datetime <= s.curr.study_datetime);
    }
}

#[test]
fn forced_phrase_drives_the_labeler() {
    let vocab = VocabSpec { forced_sentences: vec!["no pneumothorax".into()], conditions: Vec::new(), ..VocabSpec::default() };
    let corpus = generate_synthetic_corpus(5, 12, &BTreeMap::from([(2, 1.0)]), &vocab).unwrap();
    let labeler = StubLabeler::shared();
    for s in pairs_of(&corpus) {
        assert_eq!(labeler.label(s.target_findings()).get(Condition::Pneumothorax), LabelValue::Negative);
    }
}

#[test]
fn files_round_trip_through_disk() {
    let corpus = generate_synthetic_corpus(8, 6, &BTreeMap::from([(2, 1.0), (4, 1.0)]), &VocabSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.write_to(dir.path(), 64).unwrap();
    let reports = ReportStore::load(&dir.path().join("reports.csv")).unwrap();
    let metadata = std::fs::File::open(dir.path().join("metadata.csv")).unwrap();
    let parsed = parse_metadata(metadata, &reports).unwrap();
    let (samples, _) = build_longitudinal_pairs(&group_by_patient(parsed.records).unwrap());
    assert_eq!(ids(&samples), ids(&pairs_of(&corpus)));

    let manifest = SplitManifest::from_csv(std::fs::File::open(dir.path().join("splits.csv")).unwrap()).unwrap();
    let samples = assign_splits(samples, &manifest, None).unwrap();
    let mut buf = Vec::new();
    write_samples_jsonl(&samples, &mut buf).unwrap();
    assert_eq!(read_samples_jsonl(buf.as_slice()).unwrap(), samples);
    for s in &samples {
        assert_eq!(s.split, manifest.0.get(&s.patient_id).copied());
    }
}

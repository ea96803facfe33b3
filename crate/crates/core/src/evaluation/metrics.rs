//! Corpus-level text generation metrics over tokenized sentences.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Recall weight for the ROUGE-L F-measure.
pub const ROUGE_L_BETA: f64 = 1.2;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total, summed over the corpus.
pub fn clipped_ngram_counts(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for (c, r) in candidates.iter().zip(references) {
        let cand = ngram_counts(c, n);
        let refs = ngram_counts(r, n);
        for (gram, count) in cand {
            total += count;
            matched += count.min(refs.get(gram).copied().unwrap_or(0));
        }
    }
    (matched, total)
}

/// Corpus BLEU with uniform weights over orders `1..=max_n` and the standard
/// brevity penalty. Any zero precision gives 0. Orders longer than every
/// candidate have no n-grams to score and are left out of the mean.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("BLEU needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "BLEU got {} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if !(1..=4).contains(&max_n) {
        return Err(Error::InvalidInput(format!("BLEU order must be 1..=4, got {max_n}")));
    }
    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        let (matched, total) = clipped_ngram_counts(candidates, references, n);
        if total == 0 {
            break;
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
        orders += 1;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * (log_sum / orders as f64).exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L: LCS-based F-measure with recall weight [`ROUGE_L_BETA`].
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("ROUGE-L needs a non-empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_L_BETA * ROUGE_L_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// Exact-match unigram alignment. Each candidate token takes the reference
/// position right after the previous match when that token fits there,
/// otherwise the earliest unused equal token. Returns aligned
/// (candidate, reference) index pairs in candidate order.
fn align_exact(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, tok) in candidate.iter().enumerate() {
        let next = pairs.last().map(|&(_, j)| j + 1);
        let pick = next
            .filter(|&j| j < reference.len() && !used[j] && reference[j] == *tok)
            .or_else(|| (0..reference.len()).find(|&j| !used[j] && reference[j] == *tok));
        if let Some(j) = pick {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Exact-match METEOR: F-mean = 10PR/(R+9P), penalty = 0.5·(chunks/m)³.
pub fn meteor(candidate: &[String], reference: &[String]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::InvalidInput("METEOR needs non-empty candidate and reference".into()));
    }
    let pairs = align_exact(candidate, reference);
    let m = pairs.len();
    if m == 0 {
        return Ok(0.0);
    }
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    Ok(f_mean * (1.0 - penalty))
}

fn check_pairs(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("metric needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Mean sentence ROUGE-L over the corpus.
pub fn rouge_l_corpus(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += rouge_l(c, r)?;
    }
    Ok(sum / candidates.len() as f64)
}

/// Mean sentence METEOR; an empty candidate scores 0.
pub fn meteor_corpus(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        if r.is_empty() {
            return Err(Error::InvalidInput("METEOR needs non-empty references".into()));
        }
        if !c.is_empty() {
            sum += meteor(c, r)?;
        }
    }
    Ok(sum / candidates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = vec![toks("the heart size is normal and lungs are clear")];
        for n in 1..=4 {
            assert_eq!(bleu(&c, &c, n).unwrap(), 1.0);
        }
        let d = vec![toks("xx yy zz")];
        assert_eq!(bleu(&d, &c, 1).unwrap(), 0.0);
        assert!(bleu(&[], &[], 1).is_err());
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")).unwrap(), 1.0);
        assert!((rouge_l(&toks("a b c d"), &toks("a c b d")).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("x y"), &toks("a b")).unwrap(), 0.0);
        assert!(rouge_l(&toks("a"), &[]).is_err());
    }

    #[test]
    fn meteor_cases() {
        assert_eq!(meteor(&toks("x"), &toks("y")).unwrap(), 0.0);
        assert_eq!(meteor(&toks("a"), &toks("a")).unwrap(), 0.5);
        assert!(meteor(&[], &toks("a")).is_err());
    }

    #[test]
    fn meteor_prefers_contiguous_alignment() {
        // the second "the" should extend the chunk "the cat", not restart it
        let c = toks("the cat sat on the mat");
        assert_eq!(meteor(&c, &c).unwrap(), 1.0 - 0.5 / 216.0);
    }
}

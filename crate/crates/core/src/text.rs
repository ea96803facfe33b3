//! Report tokenization and the token/id lookup table.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_MIN_FREQ: usize = 3;

/// Lowercases, splits on whitespace, and emits every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Inverse of [`tokenize`] up to whitespace: tokens joined by single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

/// A sequence of vocabulary ids. `len` is the token count before padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub len: usize,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        let len = ids.len();
        Self { ids, len }
    }

    /// Right-pads with PAD up to `target`; `len` is unchanged.
    pub fn padded(&self, target: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.resize(target.max(ids.len()), PAD);
        Self { ids, len: self.len }
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabEntry {
    token: String,
    id: u32,
    frequency: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    frequencies: Vec<usize>,
}

impl Vocabulary {
    /// Counts tokens over `reports` and keeps those seen at least `min_freq`
    /// times, ordered by frequency (descending) then lexicographically.
    pub fn build<I, S>(reports: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut n_reports = 0usize;
        for report in reports {
            n_reports += 1;
            for tok in tokenize(report.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if n_reports == 0 {
            return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_freq && !RESERVED.contains(&tok.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut vocab = Self {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            frequencies: Vec::new(),
        };
        for tok in RESERVED {
            vocab.push(tok.to_string(), 0);
        }
        for (tok, c) in kept {
            vocab.push(tok, c);
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String, frequency: usize) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        self.frequencies.push(frequency);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String], add_bos_eos: bool) -> TokenSeq {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        if add_bos_eos {
            ids.push(BOS);
        }
        ids.extend(tokens.iter().map(|t| self.id(t).unwrap_or(UNK)));
        if add_bos_eos {
            ids.push(EOS);
        }
        TokenSeq::new(ids)
    }

    pub fn encode_text(&self, text: &str, add_bos_eos: bool) -> TokenSeq {
        self.encode(&tokenize(text), add_bos_eos)
    }

    /// Drops reserved tokens (PAD/BOS/EOS/UNK) and joins the rest.
    pub fn decode(&self, seq: &TokenSeq) -> Result<String> {
        let mut out = Vec::with_capacity(seq.ids.len());
        for &id in &seq.ids {
            if id as usize >= self.len() {
                return Err(Error::TokenOutOfRange { id, size: self.len() });
            }
            if id > UNK {
                out.push(self.id_to_token[id as usize].as_str());
            }
        }
        Ok(detokenize(&out))
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        let entries: Vec<VocabEntry> = self
            .id_to_token
            .iter()
            .zip(&self.frequencies)
            .enumerate()
            .map(|(id, (token, &frequency))| VocabEntry {
                token: token.clone(),
                id: id as u32,
                frequency,
            })
            .collect();
        serde_json::to_writer_pretty(w, &entries)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let mut entries: Vec<VocabEntry> = serde_json::from_reader(r)?;
        entries.sort_by_key(|e| e.id);
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::InvalidInput(format!("vocabulary ids are not contiguous at {}", e.id)));
            }
        }
        for (i, name) in RESERVED.iter().enumerate() {
            if entries.get(i).map(|e| e.token.as_str()) != Some(*name) {
                return Err(Error::InvalidInput(format!("reserved id {i} must be `{name}`")));
            }
        }
        let mut vocab = Self {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            frequencies: Vec::new(),
        };
        for e in entries {
            if vocab.token_to_id.contains_key(&e.token) {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token `{}`", e.token)));
            }
            vocab.push(e.token, e.frequency);
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(tokenize("Heart size normal."), vec!["heart", "size", "normal", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  x-ray,\tAP  "), vec!["x", "-", "ray", ",", "ap"]);
    }

    #[test]
    fn vocab_min_freq() {
        let v = Vocabulary::build(["a b", "a"], 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        let v = Vocabulary::build(["a b", "a"], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("b"), None);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::build(Vec::<String>::new(), 1).is_err());
    }

    #[test]
    fn reserved_ids_and_unk() {
        let v = Vocabulary::build(["a"], 1).unwrap();
        let seq = v.encode(&["a".to_string()], true);
        assert_eq!(seq.ids, vec![BOS, 4, EOS]);
        assert_eq!(v.encode(&["zebra".to_string()], false).ids, vec![UNK]);
    }

    #[test]
    fn decode_round_trip_and_range_check() {
        let v = Vocabulary::build(["heart size normal ."], 1).unwrap();
        let seq = v.encode_text("heart size normal .", true);
        assert_eq!(v.decode(&seq).unwrap(), "heart size normal .");
        let bad = TokenSeq::new(vec![v.len() as u32]);
        assert!(matches!(v.decode(&bad), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::build(["b a a", "c"], 1).unwrap();
        let mut buf = Vec::new();
        v.write_json(&mut buf).unwrap();
        assert_eq!(Vocabulary::read_json(buf.as_slice()).unwrap(), v);
    }
}

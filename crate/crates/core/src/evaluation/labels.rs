//! The 14 clinical observations and a keyword/negation rule labeler.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "No Finding")]
    NoFinding,
    #[serde(rename = "Enlarged Cardiomediastinum")]
    EnlargedCardiomediastinum,
    #[serde(rename = "Cardiomegaly")]
    Cardiomegaly,
    #[serde(rename = "Lung Lesion")]
    LungLesion,
    #[serde(rename = "Airspace Opacity")]
    AirspaceOpacity,
    #[serde(rename = "Edema")]
    Edema,
    #[serde(rename = "Consolidation")]
    Consolidation,
    #[serde(rename = "Pneumonia")]
    Pneumonia,
    #[serde(rename = "Atelectasis")]
    Atelectasis,
    #[serde(rename = "Pneumothorax")]
    Pneumothorax,
    #[serde(rename = "Pleural Effusion")]
    PleuralEffusion,
    #[serde(rename = "Pleural Other")]
    PleuralOther,
    #[serde(rename = "Fracture")]
    Fracture,
    #[serde(rename = "Support Devices")]
    SupportDevices,
}

impl Condition {
    pub const COUNT: usize = 14;

    pub const ALL: [Condition; Condition::COUNT] = [
        Condition::NoFinding,
        Condition::EnlargedCardiomediastinum,
        Condition::Cardiomegaly,
        Condition::LungLesion,
        Condition::AirspaceOpacity,
        Condition::Edema,
        Condition::Consolidation,
        Condition::Pneumonia,
        Condition::Atelectasis,
        Condition::Pneumothorax,
        Condition::PleuralEffusion,
        Condition::PleuralOther,
        Condition::Fracture,
        Condition::SupportDevices,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::NoFinding => "No Finding",
            Condition::EnlargedCardiomediastinum => "Enlarged Cardiomediastinum",
            Condition::Cardiomegaly => "Cardiomegaly",
            Condition::LungLesion => "Lung Lesion",
            Condition::AirspaceOpacity => "Airspace Opacity",
            Condition::Edema => "Edema",
            Condition::Consolidation => "Consolidation",
            Condition::Pneumonia => "Pneumonia",
            Condition::Atelectasis => "Atelectasis",
            Condition::Pneumothorax => "Pneumothorax",
            Condition::PleuralEffusion => "Pleural Effusion",
            Condition::PleuralOther => "Pleural Other",
            Condition::Fracture => "Fracture",
            Condition::SupportDevices => "Support Devices",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidInput(format!("unknown condition `{s}`")))
    }
}

/// Label values; the numeric codes follow the usual 1 / -1 / 0 / blank convention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelValue {
    Positive,
    Negative,
    Uncertain,
    #[default]
    Unmentioned,
}

impl LabelValue {
    pub fn code(self) -> Option<i8> {
        match self {
            LabelValue::Positive => Some(1),
            LabelValue::Negative => Some(-1),
            LabelValue::Uncertain => Some(0),
            LabelValue::Unmentioned => None,
        }
    }

    pub fn is_mentioned(self) -> bool {
        self != LabelValue::Unmentioned
    }

    fn priority(self) -> u8 {
        match self {
            LabelValue::Positive => 3,
            LabelValue::Uncertain => 2,
            LabelValue::Negative => 1,
            LabelValue::Unmentioned => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector(pub [LabelValue; Condition::COUNT]);

impl LabelVector {
    pub fn get(&self, c: Condition) -> LabelValue {
        self.0[c.index()]
    }

    pub fn set(&mut self, c: Condition, v: LabelValue) {
        self.0[c.index()] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (Condition, LabelValue)> + '_ {
        Condition::ALL.into_iter().zip(self.0.iter().copied())
    }
}

/// Anything that maps findings text to the 14 labels (the stub here, or an
/// external CheXpert run fed back through [`LabelVector`]s).
pub trait Labeler {
    fn label(&self, findings_text: &str) -> LabelVector;
}

#[derive(Debug, Deserialize)]
struct RuleFile {
    negation_cues: Vec<String>,
    hedge_cues: Vec<String>,
    conditions: Vec<ConditionRule>,
}

#[derive(Debug, Deserialize)]
struct ConditionRule {
    condition: Condition,
    mentions: Vec<String>,
}

/// Keyword rules applied per sentence. A mention preceded by a negation cue
/// is negative; otherwise a hedge cue anywhere in the sentence makes it
/// uncertain; otherwise positive. Across sentences positive wins over
/// uncertain, which wins over negative.
#[derive(Debug, Clone)]
pub struct StubLabeler {
    negation_cues: Vec<Vec<String>>,
    hedge_cues: Vec<Vec<String>>,
    mentions: Vec<(Condition, Vec<Vec<String>>)>,
}

const DEFAULT_RULES: &str = include_str!("labeler_rules.json");

impl StubLabeler {
    pub fn from_json(json: &str) -> Result<Self> {
        let rules: RuleFile = serde_json::from_str(json)?;
        let phrase = |s: &String| tokenize(s);
        Ok(Self {
            negation_cues: rules.negation_cues.iter().map(phrase).collect(),
            hedge_cues: rules.hedge_cues.iter().map(phrase).collect(),
            mentions: rules
                .conditions
                .iter()
                .map(|r| (r.condition, r.mentions.iter().map(phrase).collect()))
                .collect(),
        })
    }

    /// The rule table shipped with the crate.
    pub fn shared() -> &'static StubLabeler {
        static LABELER: OnceLock<StubLabeler> = OnceLock::new();
        LABELER.get_or_init(|| StubLabeler::from_json(DEFAULT_RULES).expect("bundled labeler rules parse"))
    }

    fn label_sentence(&self, sentence: &[String], out: &mut LabelVector) {
        let hedged = self.hedge_cues.iter().any(|cue| find_phrase(sentence, cue, 0).is_some());
        for (cond, phrases) in &self.mentions {
            for phrase in phrases {
                let mut from = 0;
                while let Some(pos) = find_phrase(sentence, phrase, from) {
                    let negated = self
                        .negation_cues
                        .iter()
                        .any(|cue| find_phrase(&sentence[..pos], cue, 0).is_some());
                    let value = if negated {
                        LabelValue::Negative
                    } else if hedged {
                        LabelValue::Uncertain
                    } else {
                        LabelValue::Positive
                    };
                    if value.priority() > out.get(*cond).priority() {
                        out.set(*cond, value);
                    }
                    from = pos + 1;
                }
            }
        }
    }
}

impl Labeler for StubLabeler {
    fn label(&self, findings_text: &str) -> LabelVector {
        let mut out = LabelVector::default();
        let tokens = tokenize(findings_text);
        for sentence in tokens.split(|t| t == "." || t == ";" || t == "?" || t == "!") {
            if !sentence.is_empty() {
                self.label_sentence(sentence, &mut out);
            }
        }
        out
    }
}

fn find_phrase(tokens: &[String], phrase: &[String], from: usize) -> Option<usize> {
    if phrase.is_empty() || tokens.len() < phrase.len() {
        return None;
    }
    (from..=tokens.len() - phrase.len()).find(|&i| tokens[i..i + phrase.len()] == *phrase)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negated_pneumothorax() {
        let l = StubLabeler::shared().label("no pneumothorax.");
        for (c, v) in l.iter() {
            let expected = if c == Condition::Pneumothorax { LabelValue::Negative } else { LabelValue::Unmentioned };
            assert_eq!(v, expected, "{c}");
        }
    }

    #[test]
    fn cardiac_silhouette_enlarged_is_cardiomegaly() {
        let l = StubLabeler::shared().label("cardiac silhouette enlarged");
        assert_eq!(l.get(Condition::Cardiomegaly), LabelValue::Positive);
    }

    #[test]
    fn empty_text_unmentioned() {
        assert_eq!(StubLabeler::shared().label(""), LabelVector::default());
    }

    #[test]
    fn hedge_and_sentence_scope() {
        let l = StubLabeler::shared().label("There is possible consolidation. No effusion. Mild atelectasis.");
        assert_eq!(l.get(Condition::Consolidation), LabelValue::Uncertain);
        assert_eq!(l.get(Condition::PleuralEffusion), LabelValue::Negative);
        assert_eq!(l.get(Condition::Atelectasis), LabelValue::Positive);
    }

    #[test]
    fn positive_wins_across_sentences() {
        let l = StubLabeler::shared().label("No edema. Mild edema is seen.");
        assert_eq!(l.get(Condition::Edema), LabelValue::Positive);
    }

    #[test]
    fn no_finding_phrase_is_not_self_negated() {
        let l = StubLabeler::shared().label("No acute cardiopulmonary process.");
        assert_eq!(l.get(Condition::NoFinding), LabelValue::Positive);
    }

    #[test]
    fn condition_names_round_trip() {
        for c in Condition::ALL {
            assert_eq!(c.name().parse::<Condition>().unwrap(), c);
            assert_eq!(Condition::ALL[c.index()], c);
        }
    }
}

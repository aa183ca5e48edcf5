//! Domain types shared across the pipeline.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::codebook::{codes, LABEL_SLOTS, PATHOLOGIES};
use crate::error::{Error, Result};
use crate::text::split_sentences;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FindingLabel {
    #[default]
    Absent,
    Negative,
    Uncertain,
    Positive,
}

impl FindingLabel {
    pub fn code(self) -> i64 {
        match self {
            FindingLabel::Negative => codes::NEGATIVE,
            FindingLabel::Absent => codes::ABSENT,
            FindingLabel::Positive => codes::POSITIVE,
            FindingLabel::Uncertain => codes::UNCERTAIN,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            codes::NEGATIVE => Some(FindingLabel::Negative),
            codes::ABSENT => Some(FindingLabel::Absent),
            codes::POSITIVE => Some(FindingLabel::Positive),
            codes::UNCERTAIN => Some(FindingLabel::Uncertain),
            _ => None,
        }
    }
}

/// Fourteen-slot finding vector indexed by [`crate::codebook::FINDING_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelVector([FindingLabel; LABEL_SLOTS]);

impl LabelVector {
    pub fn new(labels: [FindingLabel; LABEL_SLOTS]) -> Self {
        Self(labels)
    }

    pub fn absent() -> Self {
        Self::default()
    }

    /// Copy of `self` with slot `index` set to `label`.
    pub fn with(mut self, index: usize, label: FindingLabel) -> Self {
        self.0[index] = label;
        self
    }

    pub fn get(&self, index: usize) -> FindingLabel {
        self.0[index]
    }

    pub fn labels(&self) -> &[FindingLabel; LABEL_SLOTS] {
        &self.0
    }

    pub fn to_codes(&self) -> [i64; LABEL_SLOTS] {
        self.0.map(FindingLabel::code)
    }

    /// Pathology slots (0..13) that are Positive or Uncertain.
    pub fn key_findings(&self) -> impl Iterator<Item = usize> + '_ {
        (0..PATHOLOGIES)
            .filter(|&j| matches!(self.0[j], FindingLabel::Positive | FindingLabel::Uncertain))
    }

    /// Pathology slots (0..13) that are exactly Positive.
    pub fn positive_findings(&self) -> impl Iterator<Item = usize> + '_ {
        (0..PATHOLOGIES).filter(|&j| self.0[j] == FindingLabel::Positive)
    }
}

pub fn parse_label_vector(raw: &[i64]) -> Result<LabelVector> {
    if raw.len() != LABEL_SLOTS {
        return Err(Error::LabelLength(raw.len()));
    }
    let mut labels = [FindingLabel::Absent; LABEL_SLOTS];
    for (index, (&value, slot)) in raw.iter().zip(labels.iter_mut()).enumerate() {
        *slot = FindingLabel::from_code(value).ok_or(Error::InvalidLabelCode { index, value })?;
    }
    Ok(LabelVector(labels))
}

/// A sentence is a key diagnostic sentence when any pathology is Positive or
/// Uncertain. "No Finding" never counts.
pub fn is_key_sentence(lv: &LabelVector) -> bool {
    lv.key_findings().next().is_some()
}

/// Stricter than [`is_key_sentence`]: only Positive pathology slots count.
pub fn has_positive_finding(lv: &LabelVector) -> bool {
    lv.positive_findings().next().is_some()
}

impl Serialize for LabelVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_codes().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LabelVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = Vec::<i64>::deserialize(deserializer)?;
        parse_label_vector(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ViewTag {
    Pa,
    Ap,
    Lateral,
    Ll,
    Unk,
    /// Non-standard projection string, kept verbatim.
    Special(String),
}

impl ViewTag {
    pub fn parse(raw: &str) -> Self {
        match raw {
            "PA" => ViewTag::Pa,
            "AP" => ViewTag::Ap,
            "LATERAL" => ViewTag::Lateral,
            "LL" => ViewTag::Ll,
            "UNK" | "" => ViewTag::Unk,
            other => ViewTag::Special(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            ViewTag::Pa => "PA",
            ViewTag::Ap => "AP",
            ViewTag::Lateral => "LATERAL",
            ViewTag::Ll => "LL",
            ViewTag::Unk => "UNK",
            ViewTag::Special(s) => s,
        }
    }
}

impl fmt::Display for ViewTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for ViewTag {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ViewTag {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(ViewTag::parse(&String::deserialize(deserializer)?))
    }
}

/// Classifier output over `[PA, AP, LATERAL, OTHER]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct ViewProbs([f64; 4]);

impl ViewProbs {
    pub const PA: usize = 0;
    pub const AP: usize = 1;
    pub const LATERAL: usize = 2;
    pub const OTHER: usize = 3;

    pub fn new(probs: [f64; 4]) -> Result<Self> {
        if probs
            .iter()
            .any(|p| !p.is_finite() || !(0.0..=1.0).contains(p))
        {
            return Err(Error::InvalidRecord(format!(
                "view probabilities must lie in [0, 1]: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidRecord(format!(
                "view probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn values(&self) -> [f64; 4] {
        self.0
    }

    /// Index and value of the largest probability; ties go to the lower index.
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = (0, self.0[0]);
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > best.1 {
                best = (i, p);
            }
        }
        best
    }
}

impl TryFrom<[f64; 4]> for ViewProbs {
    type Error = Error;

    fn try_from(value: [f64; 4]) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ViewProbs> for [f64; 4] {
    fn from(value: ViewProbs) -> Self {
        value.0
    }
}

/// Rows `[start, end)` of an EMB1 file, addressed relative to the embedding directory.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbeddingRef {
    pub file: String,
    #[serde(with = "row_range")]
    pub rows: Range<usize>,
}

impl EmbeddingRef {
    pub fn new(file: impl Into<String>, rows: Range<usize>) -> Result<Self> {
        let r = Self {
            file: file.into(),
            rows,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.start >= self.rows.end {
            return Err(Error::InvalidRecord(format!(
                "empty row range {:?} in {}",
                self.rows, self.file
            )));
        }
        Ok(())
    }
}

mod row_range {
    use std::ops::Range;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(r: &Range<usize>, s: S) -> Result<S::Ok, S::Error> {
        [r.start, r.end].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Range<usize>, D::Error> {
        let [start, end] = <[usize; 2]>::deserialize(d)?;
        Ok(start..end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub view_tag: ViewTag,
    pub view_probs: Option<ViewProbs>,
    /// Vision-encoder token rows for this image.
    pub embedding: EmbeddingRef,
    /// Optional single-row image embedding in the sentence-embedding space,
    /// used by the prior-report filter.
    pub clip: Option<EmbeddingRef>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub findings_text: String,
    pub sentences: Vec<String>,
    pub label_vectors: Option<Vec<LabelVector>>,
    pub sentence_embeddings: Option<Vec<EmbeddingRef>>,
}

impl Report {
    /// Builds a report from its findings text; sentences are derived with
    /// [`split_sentences`].
    pub fn from_text(findings_text: impl Into<String>) -> Self {
        let findings_text = findings_text.into();
        let sentences = split_sentences(&findings_text);
        Self {
            findings_text,
            sentences,
            label_vectors: None,
            sentence_embeddings: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<LabelVector>) -> Result<Self> {
        self.label_vectors = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(lv) = &self.label_vectors {
            if lv.len() != self.sentences.len() {
                return Err(Error::InvalidRecord(format!(
                    "{} label vectors for {} sentences",
                    lv.len(),
                    self.sentences.len()
                )));
            }
        }
        if let Some(emb) = &self.sentence_embeddings {
            if emb.len() != self.sentences.len() {
                return Err(Error::InvalidRecord(format!(
                    "{} sentence embeddings for {} sentences",
                    emb.len(),
                    self.sentences.len()
                )));
            }
            emb.iter().try_for_each(EmbeddingRef::validate)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub study_id: String,
    pub images: Vec<ImageRecord>,
    pub report: Report,
    /// Most recent prior report.
    pub prior1: Option<Report>,
    /// Older prior report; only present when `prior1` is.
    pub prior2: Option<Report>,
}

impl Study {
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::InvalidRecord(format!(
                "study {} has no images",
                self.study_id
            )));
        }
        if self.prior2.is_some() && self.prior1.is_none() {
            return Err(Error::InvalidRecord(format!(
                "study {} has prior2 without prior1",
                self.study_id
            )));
        }
        for img in &self.images {
            img.embedding.validate()?;
            if let Some(c) = &img.clip {
                c.validate()?;
            }
        }
        self.report.validate()?;
        for p in self.prior1.iter().chain(self.prior2.iter()) {
            p.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::NO_FINDING;
    use proptest::prelude::*;

    fn raw_with(index: usize, value: i64) -> [i64; 14] {
        let mut raw = [0; 14];
        raw[index] = value;
        raw
    }

    #[test]
    fn parses_codebook() {
        let lv = parse_label_vector(&raw_with(0, 1)).unwrap();
        assert_eq!(lv.get(0), FindingLabel::Positive);
        assert!((1..14).all(|j| lv.get(j) == FindingLabel::Absent));

        let lv = parse_label_vector(&raw_with(13, 1)).unwrap();
        assert_eq!(lv.get(NO_FINDING), FindingLabel::Positive);
        assert!((0..13).all(|j| lv.get(j) == FindingLabel::Absent));

        let lv = parse_label_vector(&[-1, 0, 1, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(lv.get(0), FindingLabel::Negative);
        assert_eq!(lv.get(3), FindingLabel::Uncertain);
    }

    #[test]
    fn rejects_out_of_codebook() {
        match parse_label_vector(&raw_with(3, 3)) {
            Err(Error::InvalidLabelCode { index: 3, value: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_label_vector(&[0; 13]),
            Err(Error::LabelLength(13))
        ));
    }

    #[test]
    fn key_sentence_predicates() {
        let absent = LabelVector::absent();
        assert!(!is_key_sentence(&absent));
        assert!(!has_positive_finding(&absent));

        let unc = absent.with(5, FindingLabel::Uncertain);
        assert!(is_key_sentence(&unc));
        assert!(!has_positive_finding(&unc));

        let pos = absent.with(2, FindingLabel::Positive);
        assert!(is_key_sentence(&pos));
        assert!(has_positive_finding(&pos));

        let no_finding = absent.with(NO_FINDING, FindingLabel::Positive);
        assert!(!is_key_sentence(&no_finding));
        assert!(!has_positive_finding(&no_finding));
    }

    #[test]
    fn view_tags_round_trip_specials() {
        assert_eq!(ViewTag::parse("LL"), ViewTag::Ll);
        assert_eq!(ViewTag::parse(""), ViewTag::Unk);
        let t = ViewTag::parse("LAO oblique");
        assert_eq!(t, ViewTag::Special("LAO oblique".into()));
        assert_eq!(t.as_str(), "LAO oblique");
    }

    #[test]
    fn view_probs_validation() {
        assert!(ViewProbs::new([0.25; 4]).is_ok());
        assert!(ViewProbs::new([0.5, 0.5, 0.1, 0.0]).is_err());
        assert!(ViewProbs::new([1.2, -0.2, 0.0, 0.0]).is_err());
        assert_eq!(
            ViewProbs::new([0.1, 0.6, 0.3, 0.0]).unwrap().argmax(),
            (1, 0.6)
        );
    }

    #[test]
    fn prior2_requires_prior1() {
        let study = Study {
            study_id: "s".into(),
            images: vec![ImageRecord {
                image_id: "i".into(),
                view_tag: ViewTag::Pa,
                view_probs: None,
                embedding: EmbeddingRef::new("a.emb", 0..1).unwrap(),
                clip: None,
            }],
            report: Report::from_text("No effusion."),
            prior1: None,
            prior2: Some(Report::from_text("Old.")),
        };
        assert!(study.validate().is_err());
    }

    fn label_strategy() -> impl Strategy<Value = [i64; 14]> {
        prop::array::uniform14(-1i64..=2)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn label_codes_round_trip(raw in label_strategy()) {
            let lv = parse_label_vector(&raw).unwrap();
            prop_assert_eq!(lv.to_codes(), raw);
            let json = serde_json::to_string(&lv).unwrap();
            prop_assert_eq!(serde_json::from_str::<LabelVector>(&json).unwrap(), lv);
        }

        #[test]
        fn predicate_implications(raw in label_strategy()) {
            let lv = parse_label_vector(&raw).unwrap();
            let any_uncertain = (0..13).any(|j| lv.get(j) == FindingLabel::Uncertain);
            if is_key_sentence(&lv) {
                prop_assert!(has_positive_finding(&lv) || any_uncertain);
            }
            if has_positive_finding(&lv) {
                prop_assert!(is_key_sentence(&lv));
            }
        }
    }
}

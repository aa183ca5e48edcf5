//! Token-sensitive loss weighting.
//!
//! Key diagnostic sentences (any pathology Positive or Uncertain) get a raw
//! weight from the training-set frequency of their rarest finding, the raw
//! weights are rescaled into `[alpha, 1]` by their maximum, and every token of
//! the sentence inherits the sentence weight. The composite loss is
//! `L_CE + gamma · L_key`.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{FINDING_NAMES, PATHOLOGIES};
use crate::error::{Error, Result};
use crate::model::{is_key_sentence, LabelVector, Report, Study};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FreqTable {
    pub counts: [u64; PATHOLOGIES],
}

#[derive(Serialize, Deserialize)]
struct FreqEntry {
    index: usize,
    name: String,
    count: u64,
}

impl Serialize for FreqTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<FreqEntry> = self
            .counts
            .iter()
            .enumerate()
            .map(|(index, &count)| FreqEntry {
                index,
                name: FINDING_NAMES[index].to_string(),
                count,
            })
            .collect();
        entries.serialize(s)
    }
}

impl<'de> Deserialize<'de> for FreqTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let entries = Vec::<FreqEntry>::deserialize(d)?;
        if entries.len() != PATHOLOGIES {
            return Err(D::Error::custom(format!(
                "frequency table needs {PATHOLOGIES} entries, got {}",
                entries.len()
            )));
        }
        let mut counts = [0; PATHOLOGIES];
        for e in entries {
            if e.index >= PATHOLOGIES || FINDING_NAMES[e.index] != e.name {
                return Err(D::Error::custom(format!(
                    "unknown finding {} at index {}",
                    e.name, e.index
                )));
            }
            counts[e.index] = e.count;
        }
        Ok(FreqTable { counts })
    }
}

impl FreqTable {
    fn merge(mut self, other: FreqTable) -> FreqTable {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(path, e))
    }

    /// Pathology indices sorted from least to most frequent; ties keep index order.
    pub fn rarity_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..PATHOLOGIES).collect();
        idx.sort_by_key(|&j| self.counts[j]);
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingMode {
    /// A pathology counts once per report.
    #[default]
    Report,
    /// Every key sentence mentioning the pathology counts.
    Sentence,
}

/// Frequency of each pathology (Positive or Uncertain) over the current
/// reports of `corpus`.
pub fn label_frequencies(corpus: &[Study], mode: CountingMode) -> Result<FreqTable> {
    corpus
        .par_iter()
        .map(|study| {
            let labels = study
                .report
                .label_vectors
                .as_ref()
                .ok_or_else(|| Error::MissingLabels(study.study_id.clone()))?;
            let mut t = FreqTable::default();
            match mode {
                CountingMode::Report => {
                    let mut seen = [false; PATHOLOGIES];
                    for lv in labels {
                        lv.key_findings().for_each(|j| seen[j] = true);
                    }
                    for (c, s) in t.counts.iter_mut().zip(seen) {
                        *c += u64::from(s);
                    }
                }
                CountingMode::Sentence => {
                    for lv in labels {
                        lv.key_findings().for_each(|j| t.counts[j] += 1);
                    }
                }
            }
            Ok(t)
        })
        .try_reduce(FreqTable::default, |a, b| Ok(a.merge(b)))
}

/// Frequency of the rarest Positive/Uncertain pathology in the sentence, or
/// `None` for sentences that are not key sentences.
pub fn sentence_rarity(lv: &LabelVector, freq: &FreqTable) -> Option<u64> {
    lv.key_findings().map(|j| freq.counts[j]).min()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TierConfig {
    /// High-frequency threshold: `f >= t1` gets raw weight 1.0.
    pub t1: u64,
    /// Mid-frequency threshold: `t2 <= f < t1` gets 1.5, below gets 2.0.
    pub t2: u64,
    /// Lower bound of normalized weights.
    pub alpha: f64,
    /// Multiplier of the key-sentence loss.
    pub gamma: f64,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            t1: 20_000,
            t2: 8_000,
            alpha: 0.1,
            gamma: 2.0,
        }
    }
}

impl TierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t2 >= self.t1 {
            return Err(Error::Config(format!(
                "t2 ({}) must be below t1 ({})",
                self.t2, self.t1
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be finite and non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

pub fn raw_weight(f: u64, cfg: &TierConfig) -> f64 {
    if f >= cfg.t1 {
        1.0
    } else if f >= cfg.t2 {
        1.5
    } else {
        2.0
    }
}

/// Rescales raw weights into `[alpha, 1]` by their maximum `M`.
pub fn normalize_weights(raws: &[f64], cfg: &TierConfig) -> Result<(Vec<f64>, f64)> {
    let max = raws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raws.is_empty() {
        return Err(Error::EmptyWeightSet);
    }
    if raws.iter().any(|&r| !r.is_finite() || r <= 0.0) {
        return Err(Error::Config(
            "raw weights must be positive and finite".into(),
        ));
    }
    Ok((
        raws.iter()
            .map(|&r| normalize_one(r, max, cfg.alpha))
            .collect(),
        max,
    ))
}

/// Clamped because `alpha + (1 - alpha)` can round above 1.
fn normalize_one(raw: f64, max: f64, alpha: f64) -> f64 {
    (alpha + (1.0 - alpha) * raw / max).clamp(alpha, 1.0)
}

/// Scope of the normalization maximum `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Maximum over the key sentences of the current batch.
    #[default]
    Batch,
    /// Maximum over every key sentence of the corpus.
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPlan {
    /// 0 for non-key sentences, `[alpha, 1]` for key sentences.
    pub sentence_weights: Vec<f64>,
    pub token_weights: Vec<f64>,
    /// Normalization maximum; `None` when no key sentence was seen.
    pub max_raw: Option<f64>,
}

fn sentence_raws(report: &Report, freq: &FreqTable, cfg: &TierConfig) -> Result<Vec<Option<f64>>> {
    let labels = report
        .label_vectors
        .as_ref()
        .ok_or_else(|| Error::AlignmentError("report has no label vectors".into()))?;
    if labels.len() != report.sentences.len() {
        return Err(Error::AlignmentError(format!(
            "{} label vectors for {} sentences",
            labels.len(),
            report.sentences.len()
        )));
    }
    Ok(labels
        .iter()
        .map(|lv| {
            debug_assert_eq!(sentence_rarity(lv, freq).is_some(), is_key_sentence(lv));
            sentence_rarity(lv, freq).map(|f| raw_weight(f, cfg))
        })
        .collect())
}

/// Largest raw weight over the key sentences of `reports`.
pub fn max_raw_weight<'a>(
    reports: impl IntoIterator<Item = &'a Report>,
    freq: &FreqTable,
    cfg: &TierConfig,
) -> Result<Option<f64>> {
    let mut max: Option<f64> = None;
    for r in reports {
        for raw in sentence_raws(r, freq, cfg)?.into_iter().flatten() {
            max = Some(max.map_or(raw, |m| m.max(raw)));
        }
    }
    Ok(max)
}

fn check_spans(spans: &[Range<usize>], sentences: usize) -> Result<usize> {
    if spans.len() != sentences {
        return Err(Error::AlignmentError(format!(
            "{} spans for {sentences} sentences",
            spans.len()
        )));
    }
    let mut next = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start != next || s.end < s.start {
            return Err(Error::AlignmentError(format!(
                "span {i} ({s:?}) does not continue the token stream at {next}"
            )));
        }
        next = s.end;
    }
    Ok(next)
}

/// Weight plan for one report, normalized by the report's own maximum.
pub fn build_weight_plan(
    report: &Report,
    freq: &FreqTable,
    cfg: &TierConfig,
    spans: &[Range<usize>],
) -> Result<WeightPlan> {
    build_weight_plan_with_max(report, freq, cfg, spans, None)
}

/// Weight plan normalized by `max_raw` when given (batch or corpus scope),
/// otherwise by the report's own maximum.
pub fn build_weight_plan_with_max(
    report: &Report,
    freq: &FreqTable,
    cfg: &TierConfig,
    spans: &[Range<usize>],
    max_raw: Option<f64>,
) -> Result<WeightPlan> {
    let raws = sentence_raws(report, freq, cfg)?;
    let n_tokens = check_spans(spans, raws.len())?;
    let own_max = raws
        .iter()
        .flatten()
        .copied()
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    let max = match (max_raw, own_max) {
        (Some(m), Some(own)) if own > m => {
            return Err(Error::Config(format!(
                "normalization maximum {m} is below a sentence raw weight {own}"
            )))
        }
        (Some(m), _) => Some(m),
        (None, own) => own,
    };

    let sentence_weights: Vec<f64> = raws
        .iter()
        .map(|raw| match (raw, max) {
            (Some(r), Some(m)) => normalize_one(*r, m, cfg.alpha),
            _ => 0.0,
        })
        .collect();
    let mut token_weights = vec![0.0; n_tokens];
    for (span, &w) in spans.iter().zip(&sentence_weights) {
        token_weights[span.clone()].fill(w);
    }
    Ok(WeightPlan {
        sentence_weights,
        token_weights,
        max_raw: max,
    })
}

/// Plans for a batch of reports sharing one normalization maximum.
pub fn build_batch_plans(
    batch: &[(&Report, &[Range<usize>])],
    freq: &FreqTable,
    cfg: &TierConfig,
) -> Result<Vec<WeightPlan>> {
    let max = max_raw_weight(batch.iter().map(|(r, _)| *r), freq, cfg)?;
    batch
        .iter()
        .map(|(r, spans)| build_weight_plan_with_max(r, freq, cfg, spans, max))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TslLoss {
    pub ce: f64,
    pub key: f64,
    pub total: f64,
}

pub fn tsl_loss(token_losses: &[f64], plan: &WeightPlan, cfg: &TierConfig) -> Result<TslLoss> {
    if token_losses.len() != plan.token_weights.len() {
        return Err(Error::AlignmentError(format!(
            "{} token losses for {} token weights",
            token_losses.len(),
            plan.token_weights.len()
        )));
    }
    if token_losses.is_empty() {
        return Ok(TslLoss {
            ce: 0.0,
            key: 0.0,
            total: 0.0,
        });
    }
    let n = token_losses.len() as f64;
    let ce = token_losses.iter().sum::<f64>() / n;
    let key = token_losses
        .iter()
        .zip(&plan.token_weights)
        .map(|(l, w)| w * l)
        .sum::<f64>()
        / n;
    Ok(TslLoss {
        ce,
        key,
        total: ce + cfg.gamma * key,
    })
}

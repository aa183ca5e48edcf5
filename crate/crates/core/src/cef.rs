//! Similarity-gated filtering of prior-report sentences.
//!
//! Sentences from the two prior reports first pass a positive-finding gate,
//! then a cosine-similarity gate against the pooled image embedding of the
//! current study. In dynamic mode, older-prior sentences that mention a
//! finding absent from the most recent prior must clear the stricter
//! `tau_high_plus` threshold instead of `tau`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::codebook::PATHOLOGIES;
use crate::error::{Error, Result};
use crate::matrix::dot;
use crate::model::{has_positive_finding, LabelVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// Most recent prior report.
    Prior1,
    /// Older prior report.
    Prior2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub text: String,
    pub source: PriorSource,
    pub labels: LabelVector,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Positive-finding gate only.
    None,
    /// Every sentence needs `sim >= tau`.
    Fixed,
    /// Like `Fixed`, with `tau_high_plus` for older-prior sentences that
    /// mention a vanished finding.
    #[default]
    Dynamic,
}

/// Which older-prior sentences the stricter threshold applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrictScope {
    #[default]
    VanishedOnly,
    AllPrior2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub mode: FilterMode,
    pub tau: f64,
    pub tau_high_plus: f64,
    pub require_positive: bool,
    pub strict_scope: StrictScope,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mode: FilterMode::Dynamic,
            tau: 0.22,
            tau_high_plus: 0.30,
            require_positive: true,
            strict_scope: StrictScope::VanishedOnly,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || !self.tau_high_plus.is_finite() {
            return Err(Error::Config("filter thresholds must be finite".into()));
        }
        if self.mode == FilterMode::Dynamic && self.tau_high_plus <= self.tau {
            return Err(Error::Config(format!(
                "tau_high_plus ({}) must exceed tau ({}) in dynamic mode",
                self.tau_high_plus, self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NoPositiveFinding,
    BelowTau,
    BelowTauHighPlus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedSentence {
    #[serde(flatten)]
    pub record: SentenceRecord,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterOutcome {
    /// Prior1 sentences first, then Prior2, each in original order.
    pub retained: Vec<SentenceRecord>,
    pub dropped: Vec<DroppedSentence>,
}

pub fn cosine_sim(v: &[f64], t: &[f64]) -> Result<f64> {
    if v.len() != t.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of vectors with {} and {} entries",
            v.len(),
            t.len()
        )));
    }
    let nv = dot(v, v).sqrt();
    let nt = dot(t, t).sqrt();
    if nv == 0.0 || nt == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(v, t) / (nv * nt)).clamp(-1.0, 1.0))
}

/// Pathologies Positive in some older-prior sentence but in no sentence of
/// the most recent prior.
pub fn vanished_findings(prior1: &[SentenceRecord], prior2: &[SentenceRecord]) -> BTreeSet<usize> {
    let mut recent = [false; PATHOLOGIES];
    for s in prior1 {
        s.labels.positive_findings().for_each(|j| recent[j] = true);
    }
    prior2
        .iter()
        .flat_map(|s| s.labels.positive_findings())
        .filter(|&j| !recent[j])
        .collect()
}

/// Mean of per-image embeddings.
pub fn pool_image_embeddings<V: AsRef<[f64]>>(per_image: &[V]) -> Result<Vec<f64>> {
    let first = per_image
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no image embeddings to pool".into()))?;
    let dim = first.as_ref().len();
    let mut out = vec![0.0; dim];
    for e in per_image {
        let e = e.as_ref();
        if e.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "image embeddings of dims {} and {dim}",
                e.len()
            )));
        }
        out.iter_mut().zip(e).for_each(|(o, x)| *o += x);
    }
    let n = per_image.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

pub fn filter_prior(
    sentences: &[SentenceRecord],
    image_embedding: &[f64],
    cfg: &FilterConfig,
) -> Result<FilterOutcome> {
    let (prior1, prior2): (Vec<&SentenceRecord>, Vec<&SentenceRecord>) = sentences
        .iter()
        .partition(|s| s.source == PriorSource::Prior1);

    let mut recent = [false; PATHOLOGIES];
    for s in &prior1 {
        s.labels.positive_findings().for_each(|j| recent[j] = true);
    }
    let mentions_vanished = |s: &SentenceRecord| s.labels.positive_findings().any(|j| !recent[j]);

    let mut out = FilterOutcome::default();
    for s in prior1.into_iter().chain(prior2) {
        let sim = cosine_sim(image_embedding, &s.embedding)?;
        let mut record = s.clone();
        record.similarity = Some(sim);

        if cfg.require_positive && !has_positive_finding(&record.labels) {
            out.dropped.push(DroppedSentence {
                record,
                reason: DropReason::NoPositiveFinding,
            });
            continue;
        }
        let strict = cfg.mode == FilterMode::Dynamic
            && record.source == PriorSource::Prior2
            && match cfg.strict_scope {
                StrictScope::AllPrior2 => true,
                StrictScope::VanishedOnly => mentions_vanished(&record),
            };
        let verdict = match cfg.mode {
            FilterMode::None => None,
            _ if strict => (sim < cfg.tau_high_plus).then_some(DropReason::BelowTauHighPlus),
            _ => (sim < cfg.tau).then_some(DropReason::BelowTau),
        };
        match verdict {
            None => out.retained.push(record),
            Some(reason) => out.dropped.push(DroppedSentence { record, reason }),
        }
    }
    Ok(out)
}

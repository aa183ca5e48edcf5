//! Retention of stale and still-relevant prior sentences under each filter
//! mode.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cef::{FilterConfig, FilterMode, PriorSource};
use crate::error::{Error, Result};
use crate::io::EmbeddingStore;
use crate::lab::synth::{SentenceKind, StudyTruth};
use crate::model::Study;
use crate::pipeline::filter_study;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: FilterMode,
    pub tau: f64,
    pub tau_high_plus: f64,
    pub stale_total: usize,
    pub stale_retained: usize,
    pub retained_stale_rate: f64,
    pub relevant_total: usize,
    pub relevant_retained: usize,
    pub retained_relevant_rate: f64,
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    stale_total: usize,
    stale_retained: usize,
    relevant_total: usize,
    relevant_retained: usize,
}

impl Tally {
    fn add(mut self, o: Tally) -> Tally {
        self.stale_total += o.stale_total;
        self.stale_retained += o.stale_retained;
        self.relevant_total += o.relevant_total;
        self.relevant_retained += o.relevant_retained;
        self
    }
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn tally_study(
    study: &Study,
    truth: &StudyTruth,
    store: &EmbeddingStore,
    cfg: &FilterConfig,
) -> Result<Tally> {
    let images: Vec<_> = study.images.iter().collect();
    let outcome = filter_study(study, &images, store, cfg)?;
    let kinds: HashMap<(PriorSource, &str), SentenceKind> = truth
        .priors
        .iter()
        .map(|p| ((p.source, p.text.as_str()), p.kind))
        .collect();
    let kind_of = |source: PriorSource, text: &str| {
        kinds.get(&(source, text)).copied().ok_or_else(|| {
            Error::AlignmentError(format!("study {}: no truth for {text:?}", study.study_id))
        })
    };

    let mut t = Tally::default();
    for s in &outcome.retained {
        match kind_of(s.source, &s.text)? {
            SentenceKind::Stale => {
                t.stale_total += 1;
                t.stale_retained += 1;
            }
            SentenceKind::Relevant => {
                t.relevant_total += 1;
                t.relevant_retained += 1;
            }
            SentenceKind::Neutral => {}
        }
    }
    for d in &outcome.dropped {
        match kind_of(d.record.source, &d.record.text)? {
            SentenceKind::Stale => t.stale_total += 1,
            SentenceKind::Relevant => t.relevant_total += 1,
            SentenceKind::Neutral => {}
        }
    }
    Ok(t)
}

/// One row per `(tau, mode)`. Dynamic rows keep the configured gap
/// `tau_high_plus - tau` above each `tau`.
pub fn filter_ablation(
    studies: &[Study],
    truth: &[StudyTruth],
    store: &EmbeddingStore,
    base: &FilterConfig,
    taus: &[f64],
    modes: &[FilterMode],
) -> Result<Vec<AblationRow>> {
    if studies.len() != truth.len() {
        return Err(Error::AlignmentError(format!(
            "{} studies but {} truth records",
            studies.len(),
            truth.len()
        )));
    }
    let gap = base.tau_high_plus - base.tau;
    let mut rows = Vec::new();
    for &tau in taus {
        for &mode in modes {
            let cfg = FilterConfig {
                mode,
                tau,
                tau_high_plus: tau + gap,
                ..*base
            };
            cfg.validate()?;
            let t = studies
                .par_iter()
                .zip(truth)
                .map(|(s, tr)| tally_study(s, tr, store, &cfg))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(Tally::default(), Tally::add);
            rows.push(AblationRow {
                mode,
                tau,
                tau_high_plus: cfg.tau_high_plus,
                stale_total: t.stale_total,
                stale_retained: t.stale_retained,
                retained_stale_rate: rate(t.stale_retained, t.stale_total),
                relevant_total: t.relevant_total,
                relevant_retained: t.relevant_retained,
                retained_relevant_rate: rate(t.relevant_retained, t.relevant_total),
            });
        }
    }
    Ok(rows)
}

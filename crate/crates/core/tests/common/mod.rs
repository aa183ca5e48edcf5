#![allow(dead_code)]

use sure_core::cef::{
    DropReason, FilterConfig, FilterMode, FilterOutcome, PriorSource, SentenceRecord, StrictScope,
};
use sure_core::lab::{generate_corpus, SynthConfig};
use sure_core::model::FindingLabel;
use sure_core::pipeline::{image_embedding, prior_records};

/// Verdict for one sentence: `None` when kept, else the reason name.
pub type Verdict = Option<&'static str>;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub source: PriorSource,
    pub text: String,
    pub similarity: f64,
    pub verdict: Verdict,
}

fn norm(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x * x;
    }
    s.sqrt()
}

pub fn oracle_cosine(v: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..v.len() {
        s += v[i] * t[i];
    }
    (s / (norm(v) * norm(t))).clamp(-1.0, 1.0)
}

fn positive(s: &SentenceRecord, j: usize) -> bool {
    s.labels.get(j) == FindingLabel::Positive
}

/// Straight re-reading of the retention rule, sentence by sentence, in the
/// order the filter reports them (prior1 first, then prior2).
pub fn oracle_filter(
    records: &[SentenceRecord],
    image: &[f64],
    cfg: &FilterConfig,
) -> Vec<OracleRow> {
    let mut ordered: Vec<&SentenceRecord> = Vec::new();
    for s in records {
        if s.source == PriorSource::Prior1 {
            ordered.push(s);
        }
    }
    for s in records {
        if s.source == PriorSource::Prior2 {
            ordered.push(s);
        }
    }
    let mut out = Vec::new();
    for s in ordered {
        let mut has_positive = false;
        for j in 0..13 {
            if positive(s, j) {
                has_positive = true;
            }
        }
        let sim = oracle_cosine(image, &s.embedding);
        let verdict = if cfg.require_positive && !has_positive {
            Some("no_positive_finding")
        } else {
            match cfg.mode {
                FilterMode::None => None,
                FilterMode::Fixed => {
                    if sim >= cfg.tau {
                        None
                    } else {
                        Some("below_tau")
                    }
                }
                FilterMode::Dynamic => {
                    let mut strict = false;
                    if s.source == PriorSource::Prior2 {
                        if cfg.strict_scope == StrictScope::AllPrior2 {
                            strict = true;
                        }
                        for j in 0..13 {
                            let mut in_recent = false;
                            for p in records {
                                if p.source == PriorSource::Prior1 && positive(p, j) {
                                    in_recent = true;
                                }
                            }
                            if positive(s, j) && !in_recent {
                                strict = true;
                            }
                        }
                    }
                    if strict {
                        if sim >= cfg.tau_high_plus {
                            None
                        } else {
                            Some("below_tau_high_plus")
                        }
                    } else if sim >= cfg.tau {
                        None
                    } else {
                        Some("below_tau")
                    }
                }
            }
        };
        out.push(OracleRow {
            source: s.source,
            text: s.text.clone(),
            similarity: sim,
            verdict,
        });
    }
    out
}

/// Filter inputs of every synthetic study that has at least one prior.
pub fn synthetic_filter_inputs(
    n_studies: usize,
    seed: u64,
) -> Vec<(Vec<SentenceRecord>, Vec<f64>)> {
    let corpus = generate_corpus(&SynthConfig {
        n_studies,
        seed,
        ..Default::default()
    })
    .unwrap();
    let mut out = Vec::new();
    for study in &corpus.studies {
        let mut records = Vec::new();
        if let Some(p) = &study.prior1 {
            records.extend(
                prior_records(&study.study_id, p, PriorSource::Prior1, &corpus.store).unwrap(),
            );
        }
        if let Some(p) = &study.prior2 {
            records.extend(
                prior_records(&study.study_id, p, PriorSource::Prior2, &corpus.store).unwrap(),
            );
        }
        if records.is_empty() {
            continue;
        }
        let images: Vec<_> = study.images.iter().collect();
        out.push((records, image_embedding(&images, &corpus.store).unwrap()));
    }
    out
}

/// Kept and dropped rows of a filter outcome, in the filter's own order,
/// with the same shape as the oracle rows.
pub fn outcome_rows(out: &FilterOutcome) -> (Vec<OracleRow>, Vec<OracleRow>) {
    let row = |s: &SentenceRecord, verdict: Verdict| OracleRow {
        source: s.source,
        text: s.text.clone(),
        similarity: s.similarity.expect("filtered sentences carry a similarity"),
        verdict,
    };
    let kept = out.retained.iter().map(|s| row(s, None)).collect();
    let dropped = out
        .dropped
        .iter()
        .map(|d| {
            let name = match d.reason {
                DropReason::NoPositiveFinding => "no_positive_finding",
                DropReason::BelowTau => "below_tau",
                DropReason::BelowTauHighPlus => "below_tau_high_plus",
            };
            row(&d.record, Some(name))
        })
        .collect();
    (kept, dropped)
}

/// True when the filter agrees with the oracle on every sentence, including
/// order and similarity bits.
pub fn matches_oracle(
    out: &FilterOutcome,
    records: &[SentenceRecord],
    image: &[f64],
    cfg: &FilterConfig,
) -> bool {
    let oracle = oracle_filter(records, image, cfg);
    let (kept, dropped) = outcome_rows(out);
    let o_kept: Vec<_> = oracle
        .iter()
        .filter(|r| r.verdict.is_none())
        .cloned()
        .collect();
    let o_dropped: Vec<_> = oracle
        .iter()
        .filter(|r| r.verdict.is_some())
        .cloned()
        .collect();
    let same = |a: &[OracleRow], b: &[OracleRow]| {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.source == y.source
                    && x.text == y.text
                    && x.verdict == y.verdict
                    && x.similarity.to_bits() == y.similarity.to_bits()
            })
    };
    same(&kept, &o_kept) && same(&dropped, &o_dropped)
}

/// Input positions of the kept sentences.
pub fn kept_positions(out: &FilterOutcome, records: &[SentenceRecord]) -> Vec<usize> {
    let mut used = vec![false; records.len()];
    let mut pos = Vec::new();
    for s in &out.retained {
        let i = (0..records.len())
            .find(|&i| {
                !used[i]
                    && records[i].source == s.source
                    && records[i].text == s.text
                    && records[i].embedding == s.embedding
            })
            .expect("kept sentence comes from the input");
        used[i] = true;
        pos.push(i);
    }
    pos.sort_unstable();
    pos
}

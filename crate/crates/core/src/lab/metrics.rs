//! Per-finding precision, recall and F1 over predicted finding sets.

use serde::{Deserialize, Serialize};

use crate::codebook::{FINDING_NAMES, PATHOLOGIES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingMetrics {
    pub index: usize,
    pub name: String,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub per_finding: Vec<FindingMetrics>,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Scores predicted against true finding sets, one pair per study. Empty
/// denominators score 0.
pub fn score(pairs: &[(Vec<usize>, Vec<usize>)]) -> MetricTable {
    let mut tp = [0usize; PATHOLOGIES];
    let mut fp = [0usize; PATHOLOGIES];
    let mut fn_ = [0usize; PATHOLOGIES];
    for (pred, truth) in pairs {
        for j in 0..PATHOLOGIES {
            match (pred.contains(&j), truth.contains(&j)) {
                (true, true) => tp[j] += 1,
                (true, false) => fp[j] += 1,
                (false, true) => fn_[j] += 1,
                (false, false) => {}
            }
        }
    }
    let per_finding: Vec<FindingMetrics> = (0..PATHOLOGIES)
        .map(|j| {
            let precision = ratio(tp[j], tp[j] + fp[j]);
            let recall = ratio(tp[j], tp[j] + fn_[j]);
            FindingMetrics {
                index: j,
                name: FINDING_NAMES[j].to_string(),
                support: tp[j] + fn_[j],
                tp: tp[j],
                fp: fp[j],
                fn_: fn_[j],
                precision,
                recall,
                f1: f1(precision, recall),
            }
        })
        .collect();
    let (stp, sfp, sfn) = (
        tp.iter().sum(),
        fp.iter().sum::<usize>(),
        fn_.iter().sum::<usize>(),
    );
    let micro_f1 = f1(ratio(stp, stp + sfp), ratio(stp, stp + sfn));
    let macro_f1 = per_finding.iter().map(|m| m.f1).sum::<f64>() / PATHOLOGIES as f64;
    MetricTable {
        per_finding,
        micro_f1,
        macro_f1,
    }
}

impl MetricTable {
    pub fn mean_f1(&self, findings: &[usize]) -> f64 {
        if findings.is_empty() {
            return 0.0;
        }
        findings
            .iter()
            .map(|&j| self.per_finding[j].f1)
            .sum::<f64>()
            / findings.len() as f64
    }
}

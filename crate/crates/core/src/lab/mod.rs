//! Desk-scale lab: synthetic long-tailed corpus, keyword labeler, toy decoder
//! training under CE and token-weighted loss, and the prior-filter ablation.

pub mod ablation;
pub mod decoder;
pub mod labeler;
pub mod metrics;
pub mod synth;
pub mod train;

use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cef::{FilterConfig, FilterMode};
use crate::error::{Error, Result};
use crate::tsl::{FreqTable, TierConfig};
use crate::view_repair::RepairPolicy;

pub use ablation::{filter_ablation, AblationRow};
pub use decoder::{TinyDecoder, Vocab};
pub use labeler::{keyword_label, KEYWORDS};
pub use metrics::{score, FindingMetrics, MetricTable};
pub use synth::{generate_corpus, SentenceKind, StudyTruth, SynthConfig, SynthCorpus};
pub use train::{prepare_data, train_toy, LabData, LossMode, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub synth: SynthConfig,
    /// Tier thresholds sized for the synthetic training split.
    pub tsl: TierConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub repair: RepairPolicy,
    pub filter: FilterConfig,
    /// Thresholds swept by the filter ablation.
    pub taus: Vec<f64>,
    /// Number of least and most frequent findings scored as rare and common.
    pub tail_size: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            tsl: TierConfig {
                t1: 200,
                t2: 80,
                ..TierConfig::default()
            },
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            repair: RepairPolicy::default(),
            filter: FilterConfig::default(),
            taus: vec![0.1, 0.22, 0.3, 0.4],
            tail_size: 3,
        }
    }
}

impl LabConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.tsl.validate()?;
        self.train.validate()?;
        self.repair.validate()?;
        self.filter.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("lab needs at least one seed".into()));
        }
        if self.tail_size == 0 || 2 * self.tail_size > crate::codebook::PATHOLOGIES {
            return Err(Error::Config(format!(
                "tail_size {} out of range",
                self.tail_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub rare_f1_ce: f64,
    pub rare_f1_tsl: f64,
    pub common_f1_ce: f64,
    pub common_f1_tsl: f64,
    pub ce: TrainOutcome,
    pub tsl: TrainOutcome,
}

impl SeedResult {
    pub fn rare_improved(&self) -> bool {
        self.rare_f1_tsl > self.rare_f1_ce
    }

    pub fn common_delta(&self) -> f64 {
        self.common_f1_tsl - self.common_f1_ce
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub config: LabConfig,
    pub train_freq: FreqTable,
    /// Least frequent findings in the training split, rarest first.
    pub rare: Vec<usize>,
    /// Most frequent findings in the training split.
    pub common: Vec<usize>,
    pub seeds: Vec<SeedResult>,
    /// Seeds where rare-finding mean F1 is higher under the weighted loss.
    pub rare_wins: usize,
    /// Mean over seeds of the common-finding F1 change.
    pub mean_common_delta: f64,
}

/// Trains CE and weighted-loss models for every seed on one corpus; seeds
/// run in parallel.
pub fn run_imbalance(cfg: &LabConfig) -> Result<ImbalanceReport> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.synth)?;
    let data = prepare_data(
        &corpus.studies,
        &corpus.truth,
        &corpus.store,
        &cfg.repair,
        cfg.train.eval_fraction,
    )?;
    let order = data.freq.rarity_order();
    let rare = order[..cfg.tail_size].to_vec();
    let common = order[order.len() - cfg.tail_size..].to_vec();
    info!(
        "imbalance lab: {} train / {} eval studies, rare {rare:?}, common {common:?}",
        data.train.len(),
        data.eval.len()
    );

    let runs: Vec<(u64, LossMode)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| [(s, LossMode::Ce), (s, LossMode::Tsl)])
        .collect();
    let mut outcomes = runs
        .par_iter()
        .map(|&(seed, mode)| train_toy(&data, mode, &cfg.tsl, &cfg.train, seed))
        .collect::<Result<Vec<_>>>()?
        .into_iter();

    let mut seeds = Vec::new();
    while let (Some(ce), Some(tsl)) = (outcomes.next(), outcomes.next()) {
        let r = SeedResult {
            seed: ce.seed,
            rare_f1_ce: ce.metrics.mean_f1(&rare),
            rare_f1_tsl: tsl.metrics.mean_f1(&rare),
            common_f1_ce: ce.metrics.mean_f1(&common),
            common_f1_tsl: tsl.metrics.mean_f1(&common),
            ce,
            tsl,
        };
        info!(
            "seed {}: rare F1 {:.3} -> {:.3}, common F1 {:.3} -> {:.3}",
            r.seed, r.rare_f1_ce, r.rare_f1_tsl, r.common_f1_ce, r.common_f1_tsl
        );
        seeds.push(r);
    }
    let rare_wins = seeds.iter().filter(|s| s.rare_improved()).count();
    let mean_common_delta =
        seeds.iter().map(SeedResult::common_delta).sum::<f64>() / seeds.len() as f64;
    Ok(ImbalanceReport {
        config: cfg.clone(),
        train_freq: data.freq,
        rare,
        common,
        seeds,
        rare_wins,
        mean_common_delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: LabConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, mode: FilterMode, tau: f64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode && r.tau == tau)
    }
}

/// The configured filter's `tau` is always included in the sweep.
pub fn run_filter_ablation(cfg: &LabConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.synth)?;
    let mut taus = cfg.taus.clone();
    if !taus.contains(&cfg.filter.tau) {
        taus.push(cfg.filter.tau);
    }
    taus.sort_by(f64::total_cmp);
    let rows = filter_ablation(
        &corpus.studies,
        &corpus.truth,
        &corpus.store,
        &cfg.filter,
        &taus,
        &[FilterMode::None, FilterMode::Fixed, FilterMode::Dynamic],
    )?;
    Ok(AblationReport {
        config: cfg.clone(),
        rows,
    })
}

//! Synthetic long-tailed corpus with constructed embedding geometry.
//!
//! Finding `j` is active in a study independently with probability
//! `base_rate / (j + 1)^zipf_s`. Image tokens are noisy sums of per-finding
//! prototypes. Every study has a global image vector `u`; a prior sentence
//! embedding is built at a chosen cosine to `u`, drawn from a range that
//! depends on whether the sentence is still relevant, stale, or neutral.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cef::PriorSource;
use crate::codebook::PATHOLOGIES;
use crate::error::{Error, Result};
use crate::io::{write_corpus, EmbeddingStore};
use crate::lab::labeler::{keyword_label, KEYWORDS};
use crate::matrix::Matrix;
use crate::model::{EmbeddingRef, ImageRecord, Report, Study, ViewProbs, ViewTag};
use crate::tsl::FreqTable;

pub const TOKENS_FILE: &str = "tokens.emb";
pub const CLIP_FILE: &str = "clip.emb";
pub const SENTENCES_FILE: &str = "sentences.emb";

pub const FILLERS: [&str; 3] = [
    "the patient is comfortable.",
    "the study is reviewed.",
    "the exam is stable.",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_studies: usize,
    pub n_findings: usize,
    pub zipf_s: f64,
    /// Marginal of the most common finding.
    pub base_rate: f64,
    /// Probability that an older-prior finding is stale.
    pub stale_rate: f64,
    pub prior1_rate: f64,
    /// Probability of an older prior given a recent one.
    pub prior2_rate: f64,
    /// Probability an active finding is mentioned in the recent prior.
    pub persist_rate: f64,
    pub token_dim: usize,
    pub tokens_per_image: usize,
    pub lateral_rate: f64,
    pub noise: f64,
    pub relevant_sim: (f64, f64),
    pub stale_sim: (f64, f64),
    pub neutral_sim: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_studies: 2000,
            n_findings: PATHOLOGIES,
            zipf_s: 1.3,
            base_rate: 0.6,
            stale_rate: 0.3,
            prior1_rate: 0.8,
            prior2_rate: 0.7,
            persist_rate: 0.8,
            token_dim: 16,
            tokens_per_image: 6,
            lateral_rate: 0.7,
            noise: 0.1,
            relevant_sim: (0.25, 0.9),
            stale_sim: (-0.1, 0.35),
            neutral_sim: (-0.1, 0.1),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let range = |(lo, hi): (f64, f64)| -1.0 <= lo && lo <= hi && hi <= 1.0;
        let checks = [
            (self.n_findings == PATHOLOGIES, "n_findings must be 13"),
            (self.n_studies > 0, "n_studies must be positive"),
            (
                self.zipf_s > 0.0 && self.zipf_s.is_finite(),
                "zipf_s must be positive",
            ),
            (
                self.base_rate > 0.0 && self.base_rate <= 1.0,
                "base_rate must be in (0, 1]",
            ),
            (
                [
                    self.stale_rate,
                    self.prior1_rate,
                    self.prior2_rate,
                    self.persist_rate,
                    self.lateral_rate,
                ]
                .into_iter()
                .all(prob),
                "rates must be probabilities",
            ),
            (self.token_dim >= 2, "token_dim must be at least 2"),
            (
                self.tokens_per_image >= 1,
                "tokens_per_image must be at least 1",
            ),
            (
                self.noise >= 0.0 && self.noise.is_finite(),
                "noise must be non-negative",
            ),
            (
                range(self.relevant_sim) && range(self.stale_sim) && range(self.neutral_sim),
                "similarity ranges must lie in [-1, 1]",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(format!("synth: {msg}"))),
            None => Ok(()),
        }
    }

    /// Configured activation probability of each finding.
    pub fn marginals(&self) -> [f64; PATHOLOGIES] {
        std::array::from_fn(|j| self.base_rate / ((j + 1) as f64).powf(self.zipf_s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceKind {
    /// Mentions a finding active in the current study.
    Relevant,
    /// Mentions a finding that is no longer active.
    Stale,
    /// Filler or negation.
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTruth {
    pub source: PriorSource,
    pub text: String,
    pub kind: SentenceKind,
    pub finding: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTruth {
    pub study_id: String,
    /// Active findings, ascending.
    pub active: Vec<usize>,
    pub priors: Vec<PriorTruth>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub studies: Vec<Study>,
    pub truth: Vec<StudyTruth>,
    /// Report-level counts kept by the generator.
    pub freq: FreqTable,
    pub store: EmbeddingStore,
}

impl SynthCorpus {
    /// Writes `corpus.jsonl`, the embedding files, `truth.jsonl` and
    /// `freq.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.store.save(dir)?;
        write_corpus(dir.join("corpus.jsonl"), &self.studies)?;
        let truth: String = self
            .truth
            .iter()
            .map(|t| serde_json::to_string(t).map(|s| s + "\n"))
            .collect::<std::result::Result<_, _>>()?;
        let path = dir.join("truth.jsonl");
        std::fs::write(&path, truth).map_err(|e| Error::io(path, e))?;
        self.freq.save(dir.join("freq.json"))
    }
}

fn f32_round(v: f64) -> f64 {
    f64::from(v as f32)
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Unit vector at cosine `c` to the unit vector `u`.
fn at_cosine(rng: &mut ChaCha8Rng, u: &[f64], c: f64) -> Vec<f64> {
    let mut w = gaussian(rng, u.len());
    let proj: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
    w.iter_mut().zip(u).for_each(|(x, b)| *x -= proj * b);
    normalize(&mut w);
    let s = (1.0 - c * c).sqrt();
    u.iter().zip(&w).map(|(a, b)| c * a + s * b).collect()
}

fn positive_sentence(j: usize) -> String {
    format!("{} is present.", KEYWORDS[j])
}

fn negative_sentence(j: usize) -> String {
    format!("no {}.", KEYWORDS[j])
}

struct Rows {
    name: &'static str,
    rows: Vec<Vec<f64>>,
}

impl Rows {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, rows: impl IntoIterator<Item = Vec<f64>>) -> EmbeddingRef {
        let start = self.rows.len();
        self.rows.extend(
            rows.into_iter()
                .map(|r| r.into_iter().map(f32_round).collect()),
        );
        EmbeddingRef {
            file: self.name.to_string(),
            rows: start..self.rows.len(),
        }
    }

    fn into_matrix(self, dim: usize) -> Result<Matrix> {
        if self.rows.is_empty() {
            return Ok(Matrix::zeros(0, dim));
        }
        Matrix::from_rows(&self.rows)
    }
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    base: Vec<f64>,
    prototypes: Vec<Vec<f64>>,
    tokens: Rows,
    clip: Rows,
    sentences: Rows,
}

impl Generator<'_> {
    fn image_tokens(&mut self, active: &[usize], amplitude: f64) -> Vec<Vec<f64>> {
        (0..self.cfg.tokens_per_image)
            .map(|_| {
                let mut t = self.base.clone();
                for &j in active {
                    let a = amplitude * self.rng.random_range(0.5..1.5);
                    t.iter_mut()
                        .zip(&self.prototypes[j])
                        .for_each(|(x, p)| *x += a * p);
                }
                for x in t.iter_mut() {
                    *x += self.cfg.noise * self.rng.sample::<f64, _>(StandardNormal);
                }
                t
            })
            .collect()
    }

    fn frontal_tag(&mut self) -> (ViewTag, Option<ViewProbs>) {
        let r: f64 = self.rng.random();
        let probs = |p: [f64; 4]| Some(ViewProbs::new(p).expect("fixed distribution"));
        if r < 0.6 {
            (ViewTag::Pa, None)
        } else if r < 0.85 {
            (ViewTag::Ap, None)
        } else if r < 0.95 {
            (ViewTag::Unk, probs([0.85, 0.05, 0.05, 0.05]))
        } else {
            (ViewTag::Lateral, probs([0.93, 0.03, 0.02, 0.02]))
        }
    }

    fn lateral_tag(&mut self) -> (ViewTag, Option<ViewProbs>) {
        let r: f64 = self.rng.random();
        if r < 0.7 {
            (ViewTag::Lateral, None)
        } else if r < 0.9 {
            (ViewTag::Ll, None)
        } else {
            (
                ViewTag::Unk,
                Some(ViewProbs::new([0.05, 0.05, 0.85, 0.05]).expect("fixed distribution")),
            )
        }
    }

    fn sim(&mut self, kind: SentenceKind) -> f64 {
        let (lo, hi) = match kind {
            SentenceKind::Relevant => self.cfg.relevant_sim,
            SentenceKind::Stale => self.cfg.stale_sim,
            SentenceKind::Neutral => self.cfg.neutral_sim,
        };
        if lo == hi {
            lo
        } else {
            self.rng.random_range(lo..hi)
        }
    }

    fn prior_report(
        &mut self,
        u: &[f64],
        source: PriorSource,
        lines: Vec<(String, SentenceKind, Option<usize>)>,
        truth: &mut Vec<PriorTruth>,
    ) -> Result<Report> {
        let text = lines
            .iter()
            .map(|l| l.0.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let mut report = Report::from_text(text);
        debug_assert_eq!(report.sentences.len(), lines.len());
        let mut refs = Vec::with_capacity(lines.len());
        for (text, kind, finding) in lines {
            let c = self.sim(kind);
            let e = at_cosine(&mut self.rng, u, c);
            refs.push(self.sentences.push([e]));
            truth.push(PriorTruth {
                source,
                text,
                kind,
                finding,
            });
        }
        report.label_vectors = Some(report.sentences.iter().map(|s| keyword_label(s)).collect());
        report.sentence_embeddings = Some(refs);
        Ok(report)
    }

    fn study(&mut self, idx: usize, marginals: &[f64; PATHOLOGIES]) -> Result<(Study, StudyTruth)> {
        let cfg = self.cfg;
        let study_id = format!("s{idx:05}");
        let active: Vec<usize> = (0..PATHOLOGIES)
            .filter(|&j| self.rng.random_bool(marginals[j]))
            .collect();
        let inactive: Vec<usize> = (0..PATHOLOGIES).filter(|j| !active.contains(j)).collect();

        let mut u = gaussian(&mut self.rng, cfg.token_dim);
        normalize(&mut u);
        let clip = self.clip.push([u.clone()]);

        let mut images = Vec::new();
        let (tag, probs) = self.frontal_tag();
        let toks = self.image_tokens(&active, 1.0);
        images.push(ImageRecord {
            image_id: format!("{study_id}-f"),
            view_tag: tag,
            view_probs: probs,
            embedding: self.tokens.push(toks),
            clip: Some(clip.clone()),
        });
        if self.rng.random_bool(cfg.lateral_rate) {
            let (tag, probs) = self.lateral_tag();
            let toks = self.image_tokens(&active, 0.5);
            images.push(ImageRecord {
                image_id: format!("{study_id}-l"),
                view_tag: tag,
                view_probs: probs,
                embedding: self.tokens.push(toks),
                clip: Some(clip),
            });
        }

        let filler = |rng: &mut ChaCha8Rng| FILLERS[rng.random_range(0..FILLERS.len())].to_string();
        let mut lines = vec![filler(&mut self.rng)];
        lines.extend(active.iter().map(|&j| positive_sentence(j)));
        let report = Report::from_text(lines.join(" "));
        let labels = report.sentences.iter().map(|s| keyword_label(s)).collect();
        let report = report.with_labels(labels)?;

        let mut priors = Vec::new();
        let (mut prior1, mut prior2) = (None, None);
        if self.rng.random_bool(cfg.prior1_rate) {
            let mut p1 = vec![(filler(&mut self.rng), SentenceKind::Neutral, None)];
            let mut mentioned = Vec::new();
            for &j in &active {
                if self.rng.random_bool(cfg.persist_rate) {
                    p1.push((positive_sentence(j), SentenceKind::Relevant, Some(j)));
                    mentioned.push(j);
                }
            }
            if let Some(&j) = inactive.choose(&mut self.rng) {
                p1.push((negative_sentence(j), SentenceKind::Neutral, None));
            }
            prior1 = Some(self.prior_report(&u, PriorSource::Prior1, p1, &mut priors)?);

            if self.rng.random_bool(cfg.prior2_rate) {
                let mut p2 = vec![(filler(&mut self.rng), SentenceKind::Neutral, None)];
                let mut used: Vec<usize> = Vec::new();
                for _ in 0..self.rng.random_range(1..=3) {
                    let open_active: Vec<usize> = active
                        .iter()
                        .copied()
                        .filter(|j| !used.contains(j))
                        .collect();
                    let open_inactive: Vec<usize> = inactive
                        .iter()
                        .copied()
                        .filter(|j| !used.contains(j))
                        .collect();
                    let stale = open_active.is_empty() || self.rng.random_bool(cfg.stale_rate);
                    let pick = if stale {
                        let total: f64 = open_inactive.iter().map(|&j| marginals[j]).sum();
                        let mut x = self.rng.random_range(0.0..1.0) * total;
                        open_inactive
                            .iter()
                            .copied()
                            .find(|&j| {
                                x -= marginals[j];
                                x < 0.0
                            })
                            .or(open_inactive.last().copied())
                    } else {
                        open_active.choose(&mut self.rng).copied()
                    };
                    let Some(j) = pick else { continue };
                    used.push(j);
                    let kind = if stale {
                        SentenceKind::Stale
                    } else {
                        SentenceKind::Relevant
                    };
                    p2.push((positive_sentence(j), kind, Some(j)));
                }
                prior2 = Some(self.prior_report(&u, PriorSource::Prior2, p2, &mut priors)?);
            }
        }

        let study = Study {
            study_id: study_id.clone(),
            images,
            report,
            prior1,
            prior2,
        };
        study.validate()?;
        Ok((
            study,
            StudyTruth {
                study_id,
                active,
                priors,
            },
        ))
    }
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.token_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let base = gaussian(&mut rng, d)
        .into_iter()
        .map(|x| x * scale)
        .collect();
    let prototypes = (0..PATHOLOGIES)
        .map(|_| {
            let mut p = gaussian(&mut rng, d);
            normalize(&mut p);
            p
        })
        .collect();
    let mut g = Generator {
        cfg,
        rng,
        base,
        prototypes,
        tokens: Rows::new(TOKENS_FILE),
        clip: Rows::new(CLIP_FILE),
        sentences: Rows::new(SENTENCES_FILE),
    };

    let marginals = cfg.marginals();
    let mut studies = Vec::with_capacity(cfg.n_studies);
    let mut truth = Vec::with_capacity(cfg.n_studies);
    let mut freq = FreqTable::default();
    for i in 0..cfg.n_studies {
        let (s, t) = g.study(i, &marginals)?;
        t.active.iter().for_each(|&j| freq.counts[j] += 1);
        studies.push(s);
        truth.push(t);
    }

    let mut store = EmbeddingStore::new();
    store.insert(TOKENS_FILE, g.tokens.into_matrix(d)?);
    store.insert(CLIP_FILE, g.clip.into_matrix(d)?);
    store.insert(SENTENCES_FILE, g.sentences.into_matrix(d)?);
    Ok(SynthCorpus {
        studies,
        truth,
        freq,
        store,
    })
}

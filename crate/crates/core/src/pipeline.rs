//! End-to-end orchestration: repair → split → fuse → filter → weight plan,
//! one prompt bundle per study.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cef::{
    filter_prior, pool_image_embeddings, DropReason, FilterConfig, FilterMode, PriorSource,
    SentenceRecord,
};
use crate::error::{Error, Result};
use crate::favr::{favr_fuse, init_params, FusedFeatures, InitScheme, ResamplerParams};
use crate::io::{load_corpus, EmbeddingStore};
use crate::model::{ImageRecord, Report, Study};
use crate::text::tokenize_sentences;
use crate::tsl::{
    build_weight_plan_with_max, label_frequencies, max_raw_weight, CountingMode, FreqTable,
    NormScope, TierConfig, WeightPlan,
};
use crate::view_repair::{repair_study, RepairPolicy, ViewAudit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResamplerConfig {
    pub n_queries: usize,
    /// Token dim `D`; inferred from the first image embedding when absent.
    pub model_dim: Option<usize>,
    pub out_dim: usize,
    pub seed: u64,
    pub init: InitScheme,
    pub share_lateral: bool,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            n_queries: 32,
            model_dim: None,
            out_dim: 16,
            seed: 0,
            init: InitScheme::ScaledGaussian,
            share_lateral: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub corpus: PathBuf,
    /// Directory holding EMB1 files; defaults to the corpus's directory.
    pub emb_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Precomputed frequency table; computed from the corpus when absent.
    pub freq: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub repair: RepairPolicy,
    pub filter: FilterConfig,
    pub tsl: TierConfig,
    pub counting: CountingMode,
    pub norm_scope: NormScope,
    pub resampler: ResamplerConfig,
    pub paths: PathConfig,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            repair: RepairPolicy::default(),
            filter: FilterConfig::default(),
            tsl: TierConfig::default(),
            counting: CountingMode::Report,
            norm_scope: NormScope::Batch,
            resampler: ResamplerConfig::default(),
            paths: PathConfig::default(),
            workers: 1,
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks thresholds and that every configured path exists.
    pub fn validate(&self) -> Result<()> {
        self.repair.validate()?;
        self.filter.validate()?;
        self.tsl.validate()?;
        if self.resampler.n_queries == 0
            || self.resampler.out_dim == 0
            || self.resampler.model_dim == Some(0)
        {
            return Err(Error::Config(
                "resampler dimensions must be at least 1".into(),
            ));
        }
        if !self.paths.corpus.is_file() {
            return Err(Error::Config(format!(
                "corpus {} not found",
                self.paths.corpus.display()
            )));
        }
        if let Some(d) = &self.paths.emb_dir {
            if !d.is_dir() {
                return Err(Error::Config(format!(
                    "embedding dir {} not found",
                    d.display()
                )));
            }
        }
        if let Some(f) = &self.paths.freq {
            if !f.is_file() {
                return Err(Error::Config(format!(
                    "frequency table {} not found",
                    f.display()
                )));
            }
        }
        Ok(())
    }

    pub fn emb_dir(&self) -> PathBuf {
        crate::io::default_emb_dir(&self.paths.corpus, self.paths.emb_dir.as_deref())
    }
}

/// Settings shared by every study of a run, after loading.
#[derive(Debug, Clone)]
pub struct StageConfig {
    pub repair: RepairPolicy,
    pub filter: FilterConfig,
    pub tsl: TierConfig,
    pub freq: FreqTable,
    /// Corpus-wide normalization maximum; `None` normalizes per report.
    pub max_raw: Option<f64>,
    pub params: ResamplerParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSentence {
    pub text: String,
    pub source: PriorSource,
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedPromptSentence {
    pub text: String,
    pub source: PriorSource,
    pub similarity: Option<f64>,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub study_id: String,
    pub fused_features: FusedFeatures,
    pub retained_prior_sentences: Vec<PromptSentence>,
    pub dropped_prior_sentences: Vec<DroppedPromptSentence>,
    pub tokens: Vec<String>,
    pub weight_plan: WeightPlan,
    pub repair_audit: Vec<ViewAudit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedStudy {
    pub study_id: String,
    pub reason: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub studies: usize,
    pub fused: usize,
    pub skipped: usize,
    pub skipped_by_reason: BTreeMap<String, usize>,
    pub sentences_retained: usize,
    pub sentences_dropped: BTreeMap<String, usize>,
    pub images_audited: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutcome {
    pub audit: Vec<ViewAudit>,
    pub result: std::result::Result<PromptBundle, SkippedStudy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub outcomes: Vec<StudyOutcome>,
    pub summary: Summary,
}

impl PipelineOutput {
    pub fn bundles(&self) -> impl Iterator<Item = &PromptBundle> {
        self.outcomes.iter().filter_map(|o| o.result.as_ref().ok())
    }

    pub fn skipped(&self) -> impl Iterator<Item = &SkippedStudy> {
        self.outcomes.iter().filter_map(|o| o.result.as_ref().err())
    }
}

fn reason_name(e: &Error) -> &'static str {
    match e {
        Error::NoUsableViews(_) => "no_usable_views",
        Error::MissingFrontal => "missing_frontal",
        Error::MissingLabels(_) => "missing_labels",
        Error::AlignmentError(_) => "alignment_error",
        Error::ShapeMismatch(_) => "shape_mismatch",
        Error::ZeroVector => "zero_vector",
        Error::Config(_) => "config",
        _ => "other",
    }
}

fn drop_name(r: DropReason) -> &'static str {
    match r {
        DropReason::NoPositiveFinding => "no_positive_finding",
        DropReason::BelowTau => "below_tau",
        DropReason::BelowTauHighPlus => "below_tau_high_plus",
    }
}

/// Per-sentence records of a prior report.
pub fn prior_records(
    study_id: &str,
    report: &Report,
    source: PriorSource,
    store: &EmbeddingStore,
) -> Result<Vec<SentenceRecord>> {
    let labels = report
        .label_vectors
        .as_ref()
        .ok_or_else(|| Error::MissingLabels(study_id.to_string()))?;
    let embs = report.sentence_embeddings.as_ref().ok_or_else(|| {
        Error::InvalidRecord(format!("study {study_id}: prior sentences lack embeddings"))
    })?;
    report
        .sentences
        .iter()
        .zip(labels)
        .zip(embs)
        .map(|((text, lv), r)| {
            let m = store.get(r)?;
            Ok(SentenceRecord {
                text: text.clone(),
                source,
                labels: *lv,
                embedding: m.mean_row(),
                similarity: None,
            })
        })
        .collect()
}

/// Mean of each image's global embedding, falling back to its mean token.
pub fn image_embedding(images: &[&ImageRecord], store: &EmbeddingStore) -> Result<Vec<f64>> {
    let per_image = images
        .iter()
        .map(|i| {
            Ok(store
                .get(i.clip.as_ref().unwrap_or(&i.embedding))?
                .mean_row())
        })
        .collect::<Result<Vec<_>>>()?;
    pool_image_embeddings(&per_image)
}

/// Filters the priors of `study` against the given images.
pub fn filter_study(
    study: &Study,
    images: &[&ImageRecord],
    store: &EmbeddingStore,
    cfg: &FilterConfig,
) -> Result<crate::cef::FilterOutcome> {
    let mut records = Vec::new();
    if let Some(p) = &study.prior1 {
        records.extend(prior_records(
            &study.study_id,
            p,
            PriorSource::Prior1,
            store,
        )?);
    }
    if let Some(p) = &study.prior2 {
        records.extend(prior_records(
            &study.study_id,
            p,
            PriorSource::Prior2,
            store,
        )?);
    }
    if records.is_empty() {
        return Ok(Default::default());
    }
    filter_prior(&records, &image_embedding(images, store)?, cfg)
}

/// Tokens and weight plan for the current report.
pub fn report_plan(study: &Study, stage: &StageConfig) -> Result<(Vec<String>, WeightPlan)> {
    if study.report.label_vectors.is_none() {
        return Err(Error::MissingLabels(study.study_id.clone()));
    }
    let (tokens, spans) = tokenize_sentences(&study.report.sentences);
    let plan = build_weight_plan_with_max(
        &study.report,
        &stage.freq,
        &stage.tsl,
        &spans,
        stage.max_raw,
    )?;
    Ok((tokens, plan))
}

fn bundle(
    study: &Study,
    store: &EmbeddingStore,
    stage: &StageConfig,
    audit: &[ViewAudit],
    frontal: &[ImageRecord],
    lateral: &[ImageRecord],
) -> Result<PromptBundle> {
    if frontal.is_empty() {
        return Err(Error::MissingFrontal);
    }
    let hf = store
        .gather(frontal.iter().map(|i| &i.embedding))?
        .ok_or(Error::MissingFrontal)?;
    let hl = store.gather(lateral.iter().map(|i| &i.embedding))?;
    let fused = favr_fuse(&hf, hl.as_ref(), &stage.params)?;

    let usable: Vec<&ImageRecord> = frontal.iter().chain(lateral).collect();
    let filtered = filter_study(study, &usable, store, &stage.filter)?;
    let (tokens, weight_plan) = report_plan(study, stage)?;

    Ok(PromptBundle {
        study_id: study.study_id.clone(),
        fused_features: fused,
        retained_prior_sentences: filtered
            .retained
            .into_iter()
            .map(|s| PromptSentence {
                text: s.text,
                source: s.source,
                similarity: s.similarity,
            })
            .collect(),
        dropped_prior_sentences: filtered
            .dropped
            .into_iter()
            .map(|d| DroppedPromptSentence {
                text: d.record.text,
                source: d.record.source,
                similarity: d.record.similarity,
                reason: d.reason,
            })
            .collect(),
        tokens,
        weight_plan,
        repair_audit: audit.to_vec(),
    })
}

pub fn process_study(study: &Study, store: &EmbeddingStore, stage: &StageConfig) -> StudyOutcome {
    let split = repair_study(study, &stage.repair);
    let result = if split.frontal.is_empty() && split.lateral.is_empty() {
        Err(Error::NoUsableViews(study.study_id.clone()))
    } else {
        bundle(
            study,
            store,
            stage,
            &split.audit,
            &split.frontal,
            &split.lateral,
        )
    };
    let result = result.map_err(|e| {
        warn!("skipping study {}: {e}", study.study_id);
        SkippedStudy {
            study_id: study.study_id.clone(),
            reason: reason_name(&e).to_string(),
            message: e.to_string(),
        }
    });
    StudyOutcome {
        audit: split.audit,
        result,
    }
}

fn summarize(outcomes: &[StudyOutcome]) -> Summary {
    let mut s = Summary {
        studies: outcomes.len(),
        ..Default::default()
    };
    for o in outcomes {
        s.images_audited += o.audit.len();
        match &o.result {
            Ok(b) => {
                s.fused += 1;
                s.sentences_retained += b.retained_prior_sentences.len();
                for d in &b.dropped_prior_sentences {
                    *s.sentences_dropped
                        .entry(drop_name(d.reason).into())
                        .or_default() += 1;
                }
            }
            Err(k) => {
                s.skipped += 1;
                *s.skipped_by_reason.entry(k.reason.clone()).or_default() += 1;
            }
        }
    }
    s
}

/// Runs every study on a pool of `workers` threads (0 = all cores). Output
/// order follows input order.
pub fn run_studies(
    studies: &[Study],
    store: &EmbeddingStore,
    stage: &StageConfig,
    workers: usize,
) -> Result<PipelineOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<StudyOutcome> = pool.install(|| {
        studies
            .par_iter()
            .map(|s| process_study(s, store, stage))
            .collect()
    });
    let summary = summarize(&outcomes);
    Ok(PipelineOutput { outcomes, summary })
}

fn infer_model_dim(studies: &[Study], store: &EmbeddingStore) -> Result<usize> {
    let first = studies
        .iter()
        .flat_map(|s| &s.images)
        .next()
        .ok_or_else(|| Error::Config("corpus has no images".into()))?;
    Ok(store.get(&first.embedding)?.dim())
}

fn check_dims(studies: &[Study], store: &EmbeddingStore, model_dim: usize) -> Result<()> {
    for img in studies.iter().flat_map(|s| &s.images) {
        let name = &img.embedding.file;
        let m = store
            .file(name)
            .ok_or_else(|| Error::Config(format!("embedding file {name} not loaded")))?;
        if m.dim() != model_dim {
            return Err(Error::Config(format!(
                "{name} has dim {} but the resampler expects {model_dim}",
                m.dim()
            )));
        }
    }
    Ok(())
}

/// Loads corpus, embeddings and frequency table, and resolves every setting.
pub fn prepare(
    cfg: &PipelineConfig,
) -> Result<(Vec<Study>, EmbeddingStore, StageConfig, ResolvedRun)> {
    cfg.validate()?;
    let loaded = load_corpus(&cfg.paths.corpus)?;
    for e in &loaded.errors {
        warn!("{}: {e}", cfg.paths.corpus.display());
    }
    let studies = loaded.studies;
    let store = EmbeddingStore::load_for(cfg.emb_dir(), &studies)?;

    let model_dim = match cfg.resampler.model_dim {
        Some(d) => d,
        None => infer_model_dim(&studies, &store)?,
    };
    check_dims(&studies, &store, model_dim)?;

    let freq = match &cfg.paths.freq {
        Some(p) => FreqTable::from_file(p)?,
        None => {
            let labelled: Vec<Study> = studies
                .iter()
                .filter(|s| s.report.label_vectors.is_some())
                .cloned()
                .collect();
            label_frequencies(&labelled, cfg.counting)?
        }
    };
    let max_raw = match cfg.norm_scope {
        NormScope::Batch => None,
        NormScope::Corpus => max_raw_weight(
            studies
                .iter()
                .map(|s| &s.report)
                .filter(|r| r.label_vectors.is_some()),
            &freq,
            &cfg.tsl,
        )?,
    };
    let r = cfg.resampler;
    let params = init_params(
        r.seed,
        r.n_queries,
        model_dim,
        r.out_dim,
        r.init,
        r.share_lateral,
    )?;

    let mut resolved = cfg.clone();
    resolved.resampler.model_dim = Some(model_dim);
    resolved.paths.emb_dir = Some(cfg.emb_dir());
    let run = ResolvedRun {
        config: resolved,
        corpus_lines: loaded.lines,
        corpus_errors: loaded.errors.iter().map(ToString::to_string).collect(),
    };
    let stage = StageConfig {
        repair: cfg.repair,
        filter: cfg.filter,
        tsl: cfg.tsl,
        freq,
        max_raw,
        params,
    };
    Ok((studies, store, stage, run))
}

/// Effective configuration echoed into the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub config: PipelineConfig,
    pub corpus_lines: usize,
    pub corpus_errors: Vec<String>,
}

/// Full run: prepare, process, and write `bundles.jsonl`, `audit.jsonl`,
/// `skipped.jsonl`, `summary.json` and `effective_config.json` under the
/// output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let (studies, store, stage, resolved) = prepare(cfg)?;
    info!(
        "processing {} studies on {} workers",
        studies.len(),
        cfg.workers
    );
    let out = run_studies(&studies, &store, &stage, cfg.workers)?;
    write_outputs(&cfg.paths.out_dir, &out, &resolved)?;
    info!(
        "fused {} of {} studies, skipped {}",
        out.summary.fused, out.summary.studies, out.summary.skipped
    );
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_outputs(dir: &Path, out: &PipelineOutput, resolved: &ResolvedRun) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("bundles.jsonl"), out.bundles())?;
    write_jsonl(
        &dir.join("audit.jsonl"),
        out.outcomes.iter().flat_map(|o| &o.audit),
    )?;
    write_jsonl(&dir.join("skipped.jsonl"), out.skipped())?;
    write_json(&dir.join("summary.json"), &out.summary)?;
    write_json(&dir.join("effective_config.json"), resolved)
}

/// True when a retained sentence without similarity would violate the
/// bundle contract.
pub fn similarities_complete(b: &PromptBundle, mode: FilterMode) -> bool {
    mode == FilterMode::None
        || b.retained_prior_sentences
            .iter()
            .all(|s| s.similarity.is_some())
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use serde::Serialize;
use sure_core::cef::{FilterConfig, FilterMode, StrictScope};
use sure_core::favr::{favr_fuse as fuse, init_params, FusedFeatures, InitScheme, ResamplerParams};
use sure_core::gradcheck::{check_random, GradOp, GradReport, ToyShapes};
use sure_core::io::{default_emb_dir, load_corpus, write_corpus, EmbeddingStore, LoadedCorpus};
use sure_core::lab::{self, LabConfig};
use sure_core::model::{ImageRecord, Study};
use sure_core::pipeline::{self, DroppedPromptSentence, PipelineConfig, PromptSentence};
use sure_core::text::tokenize_sentences;
use sure_core::tsl::{
    build_batch_plans, build_weight_plan_with_max, label_frequencies, max_raw_weight, CountingMode,
    FreqTable, NormScope, TierConfig, WeightPlan,
};
use sure_core::view_repair::{repair_study, Fallback, RepairPolicy};
use sure_core::{Error, Result};

use crate::{
    CefArgs, CorpusArgs, CountingArg, FallbackArg, FuseArgs, GenerateArgs, GradArgs, InitArg,
    LabArgs, ModeArg, NormArg, OpArg, PolicyArgs, RepairArgs, RunArgs, ScopeArg, TslArgs,
};

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

struct JsonLines {
    path: std::path::PathBuf,
    w: BufWriter<File>,
}

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            w: BufWriter::new(file),
        })
    }

    fn push<T: Serialize>(&mut self, item: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, item)?;
        self.w.write_all(b"\n").map_err(|e| self.io(e))
    }

    fn io(&self, e: std::io::Error) -> Error {
        Error::Io {
            path: self.path.clone(),
            source: e,
        }
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| self.io(e))
    }
}

/// Prints the fully resolved configuration of a command.
fn echo_config<T: Serialize>(name: &str, cfg: &T) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({ name: cfg }))?
    );
    Ok(())
}

fn load(corpus: &Path) -> Result<LoadedCorpus> {
    let c = load_corpus(corpus)?;
    for e in &c.errors {
        warn!("{}: {e}", corpus.display());
    }
    info!(
        "loaded {} studies from {}",
        c.studies.len(),
        corpus.display()
    );
    Ok(c)
}

fn load_with_store(args: &CorpusArgs) -> Result<(Vec<Study>, EmbeddingStore)> {
    let c = load(&args.corpus)?;
    let store = EmbeddingStore::load_for(
        default_emb_dir(&args.corpus, args.emb_dir.as_deref()),
        &c.studies,
    )?;
    Ok((c.studies, store))
}

fn policy(args: &PolicyArgs) -> Result<RepairPolicy> {
    let mut p: RepairPolicy = match &args.policy {
        Some(path) => read_json(path)?,
        None => RepairPolicy::default(),
    };
    if let Some(v) = args.theta_assign {
        p.theta_assign = v;
    }
    if let Some(v) = args.theta_override {
        p.theta_override = v;
    }
    if let Some(f) = args.fallback {
        p.fallback = match f {
            FallbackArg::ExcludeImage => Fallback::ExcludeImage,
            FallbackArg::TreatAsFrontal => Fallback::TreatAsFrontal,
        };
    }
    p.validate()?;
    Ok(p)
}

pub fn repair_views(a: RepairArgs) -> Result<u8> {
    let policy = policy(&a.policy)?;
    echo_config("repair", &policy)?;
    let corpus = load(&a.corpus.corpus)?;
    let mut audit = JsonLines::create(&a.audit)?;
    let mut repaired = Vec::with_capacity(corpus.studies.len());
    let mut dropped = 0;
    for study in &corpus.studies {
        let split = repair_study(study, &policy);
        for entry in &split.audit {
            audit.push(entry)?;
        }
        let images: Vec<ImageRecord> = split.frontal.into_iter().chain(split.lateral).collect();
        if images.is_empty() {
            warn!(
                "study {} has no usable views after repair; dropped",
                study.study_id
            );
            dropped += 1;
            continue;
        }
        repaired.push(Study {
            images,
            ..study.clone()
        });
    }
    audit.finish()?;
    write_corpus(&a.out, &repaired)?;
    eprintln!("repaired {} studies, dropped {dropped}", repaired.len());
    Ok(0)
}

#[derive(Serialize)]
struct FilteredStudy {
    study_id: String,
    retained: Vec<PromptSentence>,
    dropped: Vec<DroppedPromptSentence>,
}

pub fn cef_filter(a: CefArgs) -> Result<u8> {
    let cfg = FilterConfig {
        mode: match a.mode {
            ModeArg::None => FilterMode::None,
            ModeArg::Fixed => FilterMode::Fixed,
            ModeArg::Dynamic => FilterMode::Dynamic,
        },
        tau: a.tau,
        tau_high_plus: a.tau_high,
        require_positive: !a.no_positive_gate,
        strict_scope: match a.strict_scope {
            ScopeArg::VanishedOnly => StrictScope::VanishedOnly,
            ScopeArg::AllPrior2 => StrictScope::AllPrior2,
        },
    };
    cfg.validate()?;
    let policy = policy(&a.policy)?;
    echo_config("filter", &cfg)?;
    let (studies, store) = load_with_store(&a.corpus)?;
    let mut out = JsonLines::create(&a.out)?;
    let (mut kept, mut dropped, mut skipped) = (0, 0, 0);
    for study in &studies {
        let split = repair_study(study, &policy);
        let images: Vec<&ImageRecord> = split.frontal.iter().chain(&split.lateral).collect();
        if images.is_empty() {
            warn!("study {} has no usable views; skipped", study.study_id);
            skipped += 1;
            continue;
        }
        let outcome = match pipeline::filter_study(study, &images, &store, &cfg) {
            Ok(o) => o,
            Err(e) => {
                warn!("study {}: {e}", study.study_id);
                skipped += 1;
                continue;
            }
        };
        kept += outcome.retained.len();
        dropped += outcome.dropped.len();
        out.push(&FilteredStudy {
            study_id: study.study_id.clone(),
            retained: outcome
                .retained
                .into_iter()
                .map(|s| PromptSentence {
                    text: s.text,
                    source: s.source,
                    similarity: s.similarity,
                })
                .collect(),
            dropped: outcome
                .dropped
                .into_iter()
                .map(|d| DroppedPromptSentence {
                    text: d.record.text,
                    source: d.record.source,
                    similarity: d.record.similarity,
                    reason: d.reason,
                })
                .collect(),
        })?;
    }
    out.finish()?;
    eprintln!("retained {kept} sentences, dropped {dropped}, skipped {skipped} studies");
    Ok(0)
}

#[derive(Serialize)]
struct PlanLine<'a> {
    study_id: &'a str,
    tokens: Vec<String>,
    weight_plan: WeightPlan,
}

pub fn tsl_weights(a: TslArgs) -> Result<u8> {
    let mut cfg: TierConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TierConfig::default(),
    };
    if let Some(v) = a.t1 {
        cfg.t1 = v;
    }
    if let Some(v) = a.t2 {
        cfg.t2 = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    cfg.validate()?;
    if a.batch_size == 0 {
        return Err(Error::Config("--batch-size must be at least 1".into()));
    }
    let scope = match a.scope {
        NormArg::Batch => NormScope::Batch,
        NormArg::Corpus => NormScope::Corpus,
    };
    let counting = match a.counting {
        CountingArg::Report => CountingMode::Report,
        CountingArg::Sentence => CountingMode::Sentence,
    };
    echo_config(
        "tsl",
        &serde_json::json!({ "tiers": cfg, "scope": scope, "batch_size": a.batch_size, "counting": counting }),
    )?;

    let corpus = load(&a.corpus)?;
    let studies: Vec<&Study> = corpus
        .studies
        .iter()
        .filter(|s| {
            let ok = s.report.label_vectors.is_some();
            if !ok {
                warn!("study {} has no sentence labels; skipped", s.study_id);
            }
            ok
        })
        .collect();
    let freq = match &a.freq {
        Some(p) => FreqTable::from_file(p)?,
        None => label_frequencies(
            &studies.iter().map(|s| (*s).clone()).collect::<Vec<_>>(),
            counting,
        )?,
    };
    if let Some(p) = &a.write_freq {
        freq.save(p)?;
    }

    let tokenized: Vec<_> = studies
        .iter()
        .map(|s| tokenize_sentences(&s.report.sentences))
        .collect();
    let plans: Vec<WeightPlan> = match scope {
        NormScope::Corpus => {
            let m = max_raw_weight(studies.iter().map(|s| &s.report), &freq, &cfg)?;
            studies
                .iter()
                .zip(&tokenized)
                .map(|(s, (_, spans))| build_weight_plan_with_max(&s.report, &freq, &cfg, spans, m))
                .collect::<Result<_>>()?
        }
        NormScope::Batch => {
            let mut plans = Vec::with_capacity(studies.len());
            for (chunk, toks) in studies
                .chunks(a.batch_size)
                .zip(tokenized.chunks(a.batch_size))
            {
                let batch: Vec<_> = chunk
                    .iter()
                    .zip(toks)
                    .map(|(s, (_, spans))| (&s.report, spans.as_slice()))
                    .collect();
                plans.extend(build_batch_plans(&batch, &freq, &cfg)?);
            }
            plans
        }
    };
    let mut out = JsonLines::create(&a.out)?;
    for ((s, (tokens, _)), plan) in studies.iter().zip(tokenized).zip(plans) {
        out.push(&PlanLine {
            study_id: &s.study_id,
            tokens,
            weight_plan: plan,
        })?;
    }
    out.finish()?;
    Ok(0)
}

#[derive(Serialize)]
struct FusedLine<'a> {
    study_id: &'a str,
    fused_features: FusedFeatures,
}

pub fn favr_fuse(a: FuseArgs) -> Result<u8> {
    let policy = policy(&a.policy)?;
    let (studies, store) = load_with_store(&a.corpus)?;
    let params: ResamplerParams = match &a.params {
        Some(p) => read_json(p)?,
        None => {
            let first = studies
                .iter()
                .flat_map(|s| &s.images)
                .next()
                .ok_or_else(|| Error::Config("corpus has no images".into()))?;
            let model_dim = store.get(&first.embedding)?.dim();
            let init = match a.init {
                InitArg::Gaussian => InitScheme::ScaledGaussian,
                InitArg::Identity => InitScheme::Identity,
            };
            init_params(
                a.seed,
                a.n_queries,
                model_dim,
                a.out_dim,
                init,
                a.share_lateral,
            )
            .map_err(|e| Error::Config(e.to_string()))?
        }
    };
    params
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
    echo_config(
        "resampler",
        &serde_json::json!({
            "seed": a.seed,
            "n_queries": params.n_queries(),
            "model_dim": params.model_dim(),
            "out_dim": params.out_dim(),
            "share_lateral": params.share_lateral,
            "params": a.params,
            "repair": policy,
        }),
    )?;

    let mut out = JsonLines::create(&a.out)?;
    let (mut fused, mut skipped) = (0, 0);
    for study in &studies {
        let split = repair_study(study, &policy);
        let result = (|| {
            let hf = store
                .gather(split.frontal.iter().map(|i| &i.embedding))?
                .ok_or(Error::MissingFrontal)?;
            let hl = store.gather(split.lateral.iter().map(|i| &i.embedding))?;
            fuse(&hf, hl.as_ref(), &params)
        })();
        match result {
            Ok(f) => {
                fused += 1;
                out.push(&FusedLine {
                    study_id: &study.study_id,
                    fused_features: f,
                })?;
            }
            Err(e) => {
                skipped += 1;
                warn!("study {}: {e}", study.study_id);
            }
        }
    }
    out.finish()?;
    eprintln!("fused {fused} studies, skipped {skipped}");
    Ok(0)
}

pub fn run(a: RunArgs) -> Result<u8> {
    let mut cfg = PipelineConfig::from_file(&a.config)?;
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(d) = a.out_dir {
        cfg.paths.out_dir = d;
    }
    cfg.validate()?;
    echo_config("pipeline", &cfg)?;
    let out = pipeline::run_pipeline(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&out.summary)?);
    Ok(0)
}

#[derive(Serialize)]
struct GradSummary {
    seeds: Vec<u64>,
    tol: f64,
    eps: f64,
    passed: bool,
    worst_rel_err: f64,
    reports: Vec<(u64, GradReport)>,
}

pub fn gradcheck(a: GradArgs) -> Result<u8> {
    if !(a.eps > 0.0 && a.tol > 0.0) || a.seeds == 0 {
        return Err(Error::Config(
            "--eps and --tol must be positive and --seeds at least 1".into(),
        ));
    }
    let ops: &[GradOp] = match a.op {
        OpArg::All => &[GradOp::CrossAttend, GradOp::FavrFuse],
        OpArg::CrossAttend => &[GradOp::CrossAttend],
        OpArg::FavrFuse => &[GradOp::FavrFuse],
    };
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let mut reports = Vec::new();
    for &seed in &seeds {
        for &op in ops {
            reports.push((
                seed,
                check_random(op, seed, ToyShapes::default(), a.eps, a.tol)?,
            ));
        }
    }
    let worst = reports
        .iter()
        .map(|(_, r)| r.max_rel_err)
        .fold(0.0, f64::max);
    let passed = reports.iter().all(|(_, r)| r.passed);
    let summary = GradSummary {
        seeds,
        tol: a.tol,
        eps: a.eps,
        passed,
        worst_rel_err: worst,
        reports,
    };
    if let Some(p) = &a.out {
        write_json(p, &summary)?;
    }
    println!(
        "gradcheck {}: {} checks, worst relative error {worst:.3e} (tol {:.1e})",
        if passed { "PASS" } else { "FAIL" },
        summary.reports.len(),
        a.tol
    );
    Ok(if passed { 0 } else { 2 })
}

fn lab_config(path: &Option<std::path::PathBuf>, seed: Option<u64>) -> Result<LabConfig> {
    let mut cfg = match path {
        Some(p) => LabConfig::from_file(p)?,
        None => LabConfig::default(),
    };
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn lab_imbalance(a: LabArgs) -> Result<u8> {
    let cfg = lab_config(&a.config, a.seed)?;
    echo_config("lab", &cfg)?;
    let report = lab::run_imbalance(&cfg)?;
    write_json(&a.out, &report)?;
    for s in &report.seeds {
        println!(
            "seed {}: rare F1 {:.3} (CE) vs {:.3} (TSL), common F1 {:.3} vs {:.3}",
            s.seed, s.rare_f1_ce, s.rare_f1_tsl, s.common_f1_ce, s.common_f1_tsl
        );
    }
    println!(
        "rare findings improved in {}/{} seeds; mean common-F1 change {:+.3}",
        report.rare_wins,
        report.seeds.len(),
        report.mean_common_delta
    );
    Ok(0)
}

pub fn lab_filter_ablation(a: LabArgs) -> Result<u8> {
    let cfg = lab_config(&a.config, a.seed)?;
    echo_config("lab", &cfg)?;
    let report = lab::run_filter_ablation(&cfg)?;
    write_json(&a.out, &report)?;
    println!(
        "{:<8} {:>6} {:>8} {:>12} {:>15}",
        "mode", "tau", "tau_hi", "stale_rate", "relevant_rate"
    );
    for r in &report.rows {
        println!(
            "{:<8} {:>6.3} {:>8.3} {:>12.4} {:>15.4}",
            format!("{:?}", r.mode).to_lowercase(),
            r.tau,
            r.tau_high_plus,
            r.retained_stale_rate,
            r.retained_relevant_rate
        );
    }
    Ok(0)
}

pub fn lab_generate(a: GenerateArgs) -> Result<u8> {
    let cfg = lab_config(&a.config, a.seed)?;
    echo_config("synth", &cfg.synth)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let corpus = lab::generate_corpus(&cfg.synth)?;
    corpus.save(&a.out_dir)?;
    eprintln!(
        "wrote {} studies to {}",
        corpus.studies.len(),
        a.out_dir.display()
    );
    Ok(0)
}

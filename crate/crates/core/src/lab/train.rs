//! End-to-end toy training: resampler + tiny decoder, plain SGD, CE or
//! token-weighted loss, greedy-decoding evaluation.

use std::ops::Range;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::favr::{
    favr_backward, favr_forward, favr_fuse, init_params, InitScheme, ResamplerParams,
};
use crate::io::EmbeddingStore;
use crate::lab::decoder::{TinyDecoder, Vocab, BOS, EOS};
use crate::lab::labeler::keyword_label;
use crate::lab::metrics::{score, MetricTable};
use crate::lab::synth::StudyTruth;
use crate::matrix::Matrix;
use crate::model::{FindingLabel, Report, Study};
use crate::text::tokenize_sentences;
use crate::tsl::{build_batch_plans, label_frequencies, CountingMode, FreqTable, TierConfig};
use crate::view_repair::{repair_study, RepairPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Ce,
    Tsl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub n_queries: usize,
    pub out_dim: usize,
    /// Std of the decoder's embedding and output tables at init.
    pub init_std: f64,
    pub eval_fraction: f64,
    pub max_decode_len: usize,
    /// Stop after this many SGD steps.
    pub max_steps: Option<usize>,
    /// Replace every token weight (end-of-sequence included) with this value.
    pub uniform_weight: Option<f64>,
    pub share_lateral: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr: 0.05,
            batch_size: 32,
            hidden: 32,
            n_queries: 8,
            out_dim: 16,
            init_std: 0.1,
            eval_fraction: 0.2,
            max_decode_len: 64,
            max_steps: None,
            uniform_weight: None,
            share_lateral: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.lr > 0.0
            && self.lr.is_finite()
            && self.batch_size > 0
            && self.hidden > 0
            && self.n_queries > 0
            && self.out_dim > 0
            && self.init_std > 0.0
            && self.eval_fraction > 0.0
            && self.eval_fraction < 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "invalid training configuration {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub study_id: String,
    pub frontal: Matrix,
    pub lateral: Option<Matrix>,
    pub report: Report,
    pub spans: Vec<Range<usize>>,
    /// `BOS` followed by the report tokens.
    pub inputs: Vec<usize>,
    /// The report tokens followed by `EOS`.
    pub targets: Vec<usize>,
    pub active: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LabData {
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    /// Report-level counts over the training split.
    pub freq: FreqTable,
    pub model_dim: usize,
}

/// Repairs views, gathers token matrices and encodes reports. The last
/// `eval_fraction` of studies is held out; studies without a frontal view
/// are dropped.
pub fn prepare_data(
    studies: &[Study],
    truth: &[StudyTruth],
    store: &EmbeddingStore,
    policy: &RepairPolicy,
    eval_fraction: f64,
) -> Result<LabData> {
    if studies.len() != truth.len() {
        return Err(Error::AlignmentError(format!(
            "{} studies but {} truth records",
            studies.len(),
            truth.len()
        )));
    }
    let n_eval = (studies.len() as f64 * eval_fraction).round() as usize;
    let n_train = studies.len() - n_eval;
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config(format!(
            "cannot split {} studies for evaluation",
            studies.len()
        )));
    }
    let vocab = Vocab::build(
        studies
            .iter()
            .flat_map(|s| tokenize_sentences(&s.report.sentences).0)
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str),
    );

    let mut examples = Vec::with_capacity(studies.len());
    let mut model_dim = None;
    for (i, (s, t)) in studies.iter().zip(truth).enumerate() {
        let split = repair_study(s, policy);
        let Some(frontal) = store.gather(split.frontal.iter().map(|img| &img.embedding))? else {
            warn!(
                "study {} has no frontal view; left out of the lab",
                s.study_id
            );
            continue;
        };
        model_dim.get_or_insert(frontal.dim());
        let lateral = store.gather(split.lateral.iter().map(|img| &img.embedding))?;
        let (tokens, spans) = tokenize_sentences(&s.report.sentences);
        let ids = vocab.encode(&tokens)?;
        let inputs = std::iter::once(BOS).chain(ids.iter().copied()).collect();
        let targets = ids.into_iter().chain(std::iter::once(EOS)).collect();
        examples.push((
            i < n_train,
            Example {
                study_id: s.study_id.clone(),
                frontal,
                lateral,
                report: s.report.clone(),
                spans,
                inputs,
                targets,
                active: t.active.clone(),
            },
        ));
    }
    let train_studies: Vec<Study> = studies[..n_train].to_vec();
    let freq = label_frequencies(&train_studies, CountingMode::Report)?;
    let (train, eval): (Vec<_>, Vec<_>) = examples.into_iter().partition(|(is_train, _)| *is_train);
    Ok(LabData {
        vocab,
        train: train.into_iter().map(|(_, e)| e).collect(),
        eval: eval.into_iter().map(|(_, e)| e).collect(),
        freq,
        model_dim: model_dim.ok_or_else(|| Error::Config("no study has a frontal view".into()))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub vocab: Vocab,
    pub decoder: TinyDecoder,
    pub resampler: ResamplerParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub study_id: String,
    pub generated: String,
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub mode: LossMode,
    pub seed: u64,
    pub steps: usize,
    /// Objective per step (weighted, batch-averaged).
    pub losses: Vec<f64>,
    /// Mean token cross-entropy per step.
    pub ce_losses: Vec<f64>,
    pub metrics: MetricTable,
    pub samples: Vec<Sample>,
    #[serde(skip)]
    pub model: Option<TrainedModel>,
}

/// Loss coefficient of every target token: `(1 + γ·w_t) / (N · B)`.
fn batch_coefs(
    batch: &[&Example],
    mode: LossMode,
    freq: &FreqTable,
    tsl: &TierConfig,
    uniform: Option<f64>,
) -> Result<Vec<Vec<f64>>> {
    let b = batch.len() as f64;
    let weights: Vec<Vec<f64>> = match (mode, uniform) {
        (LossMode::Ce, _) => batch.iter().map(|e| vec![0.0; e.targets.len()]).collect(),
        (LossMode::Tsl, Some(u)) => batch.iter().map(|e| vec![u; e.targets.len()]).collect(),
        (LossMode::Tsl, None) => {
            let items: Vec<(&Report, &[Range<usize>])> = batch
                .iter()
                .map(|e| (&e.report, e.spans.as_slice()))
                .collect();
            build_batch_plans(&items, freq, tsl)?
                .into_iter()
                .map(|p| {
                    p.token_weights
                        .into_iter()
                        .chain(std::iter::once(0.0))
                        .collect()
                })
                .collect()
        }
    };
    Ok(weights
        .into_iter()
        .map(|w| {
            let n = w.len() as f64;
            w.into_iter()
                .map(|w| (1.0 + tsl.gamma * w) / (n * b))
                .collect()
        })
        .collect())
}

struct StepGrads {
    objective: f64,
    ce: f64,
    decoder: TinyDecoder,
    resampler: ResamplerParams,
}

fn example_grads(
    ex: &Example,
    coefs: &[f64],
    decoder: &TinyDecoder,
    resampler: &ResamplerParams,
) -> Result<StepGrads> {
    let (fused, fc) = favr_forward(&ex.frontal, ex.lateral.as_ref(), resampler)?;
    let (_, dc) = decoder.forward(&ex.inputs, &fused.z)?;
    let (losses, g) = decoder.backward(&dc, &ex.targets, coefs)?;
    let fg = favr_backward(&fc, resampler, &g.features)?;
    Ok(StepGrads {
        objective: losses.iter().zip(coefs).map(|(l, c)| l * c).sum(),
        ce: losses.iter().sum::<f64>() / losses.len() as f64,
        decoder: g.params,
        resampler: fg.params,
    })
}

pub fn predict(model: &TrainedModel, ex: &Example, max_len: usize) -> Result<(String, Vec<usize>)> {
    let fused = favr_fuse(&ex.frontal, ex.lateral.as_ref(), &model.resampler)?;
    let ids = model.decoder.greedy(&fused.z, max_len)?;
    let text = model.vocab.decode(&ids);
    let labels = keyword_label(&text);
    let positives = (0..crate::codebook::PATHOLOGIES)
        .filter(|&j| labels.get(j) == FindingLabel::Positive)
        .collect();
    Ok((text, positives))
}

pub fn evaluate(
    model: &TrainedModel,
    eval: &[Example],
    max_len: usize,
) -> Result<(MetricTable, Vec<Sample>)> {
    let preds = eval
        .par_iter()
        .map(|ex| predict(model, ex, max_len))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = preds
        .iter()
        .zip(eval)
        .map(|((_, p), ex)| (p.clone(), ex.active.clone()))
        .collect();
    let samples = preds
        .into_iter()
        .zip(eval)
        .take(5)
        .map(|((text, _), ex)| Sample {
            study_id: ex.study_id.clone(),
            generated: text,
            active: ex.active.clone(),
        })
        .collect();
    Ok((score(&pairs), samples))
}

pub fn train_toy(
    data: &LabData,
    mode: LossMode,
    tsl: &TierConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tsl.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let (dec_seed, res_seed, shuffle_seed): (u64, u64, u64) =
        (master.random(), master.random(), master.random());
    let mut decoder = TinyDecoder::init(
        dec_seed,
        data.vocab.len(),
        cfg.hidden,
        cfg.out_dim,
        cfg.init_std,
    )?;
    let mut resampler = init_params(
        res_seed,
        cfg.n_queries,
        data.model_dim,
        cfg.out_dim,
        InitScheme::ScaledGaussian,
        cfg.share_lateral,
    )?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(shuffle_seed);

    let mut losses = Vec::new();
    let mut ce_losses = Vec::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| losses.len() >= m) {
                break 'epochs;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let coefs = batch_coefs(&batch, mode, &data.freq, tsl, cfg.uniform_weight)?;
            let grads = batch
                .par_iter()
                .zip(&coefs)
                .map(|(ex, c)| example_grads(ex, c, &decoder, &resampler))
                .collect::<Result<Vec<_>>>()?;

            let mut d_dec = decoder.zeros_like();
            let mut d_res = resampler.zeros_like();
            let (mut objective, mut ce) = (0.0, 0.0);
            for g in &grads {
                objective += g.objective;
                ce += g.ce;
                d_dec.axpy(1.0, &g.decoder)?;
                d_res.axpy(1.0, &g.resampler)?;
            }
            let step = losses.len();
            if !objective.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    loss: objective,
                });
            }
            decoder.axpy(-cfg.lr, &d_dec)?;
            resampler.axpy(-cfg.lr, &d_res)?;
            losses.push(objective);
            ce_losses.push(ce / batch.len() as f64);
        }
        debug!(
            "{mode:?} seed {seed} epoch {epoch}: loss {:?}",
            losses.last()
        );
    }

    let model = TrainedModel {
        vocab: data.vocab.clone(),
        decoder,
        resampler,
    };
    let (metrics, samples) = evaluate(&model, &data.eval, cfg.max_decode_len)?;
    Ok(TrainOutcome {
        mode,
        seed,
        steps: losses.len(),
        losses,
        ce_losses,
        metrics,
        samples,
        model: Some(model),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::synth::{generate_corpus, SynthConfig};

    fn data(n: usize) -> LabData {
        let c = generate_corpus(&SynthConfig {
            n_studies: n,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        prepare_data(
            &c.studies,
            &c.truth,
            &c.store,
            &RepairPolicy::default(),
            0.2,
        )
        .unwrap()
    }

    fn short() -> TrainConfig {
        TrainConfig {
            max_steps: Some(5),
            batch_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn split_and_encoding() {
        let d = data(100);
        assert_eq!(d.train.len() + d.eval.len(), 100);
        assert_eq!(d.eval.len(), 20);
        for e in &d.train {
            assert_eq!(e.inputs.len(), e.targets.len());
            assert_eq!(e.inputs[0], BOS);
            assert_eq!(*e.targets.last().unwrap(), EOS);
        }
    }

    #[test]
    fn unit_weights_without_gamma_match_ce_exactly() {
        let d = data(80);
        let tsl = TierConfig {
            gamma: 0.0,
            ..Default::default()
        };
        let ce = train_toy(&d, LossMode::Ce, &tsl, &short(), 3).unwrap();
        let forced = TrainConfig {
            uniform_weight: Some(1.0),
            ..short()
        };
        let t = train_toy(&d, LossMode::Tsl, &tsl, &forced, 3).unwrap();
        assert_eq!(ce.steps, 5);
        assert_eq!(ce.losses, t.losses);
        assert_eq!(ce.model, t.model);
    }

    #[test]
    fn deterministic_given_seed() {
        let d = data(60);
        let tsl = TierConfig::default();
        let a = train_toy(&d, LossMode::Tsl, &tsl, &short(), 9).unwrap();
        let b = train_toy(&d, LossMode::Tsl, &tsl, &short(), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn divergence_is_reported() {
        let d = data(60);
        let cfg = TrainConfig {
            lr: 1e300,
            ..short()
        };
        let r = train_toy(&d, LossMode::Ce, &TierConfig::default(), &cfg, 1);
        assert!(
            matches!(
                r,
                Err(Error::TrainingDiverged { .. }) | Err(Error::InvalidRecord(_))
            ),
            "{r:?}"
        );
    }

    #[test]
    fn coefficients_reduce_to_mean() {
        let d = data(40);
        let batch: Vec<&Example> = d.train.iter().take(4).collect();
        let c = batch_coefs(&batch, LossMode::Ce, &d.freq, &TierConfig::default(), None).unwrap();
        let total: f64 = c.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

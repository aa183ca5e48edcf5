use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;

use sure_core::cef::{self, FilterConfig, FilterMode, SentenceRecord};
use sure_core::favr::{self, InitScheme, ResamplerParams};
use sure_core::gradcheck::{self, GradOp, ToyShapes};
use sure_core::io;
use sure_core::matrix::Matrix;
use sure_core::model::{ViewProbs, ViewTag};
use sure_core::pipeline::{self, PipelineConfig};
use sure_core::text;
use sure_core::tsl::{self, TierConfig, WeightPlan};
use sure_core::view_repair::{self, Fallback, RepairPolicy};
use sure_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(PyModule::import(py, "json")?
        .call_method1("loads", (s,))?
        .unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = PyModule::import(obj.py(), "json")?;
    let s: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn parse_enum<T: DeserializeOwned>(name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown option {name:?}")))
}

/// Resolves one image's view. Returns a dict with `resolved`, `provenance`
/// and `confidence`.
#[pyfunction]
#[pyo3(signature = (tag, probs=None, theta_assign=0.70, theta_override=0.90, fallback="exclude_image"))]
fn repair_view(
    py: Python<'_>,
    tag: &str,
    probs: Option<[f64; 4]>,
    theta_assign: f64,
    theta_override: f64,
    fallback: &str,
) -> PyResult<Py<PyAny>> {
    let policy = RepairPolicy {
        theta_assign,
        theta_override,
        fallback: parse_enum::<Fallback>(fallback)?,
    };
    policy.validate().map_err(py_err)?;
    let probs = probs.map(ViewProbs::new).transpose().map_err(py_err)?;
    let r = view_repair::repair_view(&ViewTag::parse(tag), probs.as_ref(), &policy);
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (f, t1=20_000, t2=8_000))]
fn raw_weight(f: u64, t1: u64, t2: u64) -> PyResult<f64> {
    let cfg = TierConfig {
        t1,
        t2,
        ..Default::default()
    };
    cfg.validate().map_err(py_err)?;
    Ok(tsl::raw_weight(f, &cfg))
}

/// Normalized weights and the maximum used.
#[pyfunction]
#[pyo3(signature = (raws, alpha=0.1))]
fn normalize_weights(raws: Vec<f64>, alpha: f64) -> PyResult<(Vec<f64>, f64)> {
    let cfg = TierConfig {
        alpha,
        ..Default::default()
    };
    cfg.validate().map_err(py_err)?;
    tsl::normalize_weights(&raws, &cfg).map_err(py_err)
}

/// Returns `(ce, key, total)` for per-token losses and weights.
#[pyfunction]
#[pyo3(signature = (token_losses, token_weights, gamma=2.0))]
fn tsl_loss(
    token_losses: Vec<f64>,
    token_weights: Vec<f64>,
    gamma: f64,
) -> PyResult<(f64, f64, f64)> {
    let cfg = TierConfig {
        gamma,
        ..Default::default()
    };
    cfg.validate().map_err(py_err)?;
    let plan = WeightPlan {
        sentence_weights: Vec::new(),
        token_weights,
        max_raw: None,
    };
    let l = tsl::tsl_loss(&token_losses, &plan, &cfg).map_err(py_err)?;
    Ok((l.ce, l.key, l.total))
}

#[pyfunction]
fn cosine_sim(v: Vec<f64>, t: Vec<f64>) -> PyResult<f64> {
    cef::cosine_sim(&v, &t).map_err(py_err)
}

/// Filters prior sentences given as dicts with `text`, `source`
/// (`prior1`/`prior2`), `labels` (14 codes) and `embedding`. Returns
/// `{"retained": [...], "dropped": [...]}`.
#[pyfunction]
#[pyo3(signature = (sentences, image_embedding, mode="dynamic", tau=0.22, tau_high_plus=0.30, require_positive=true))]
fn filter_prior(
    py: Python<'_>,
    sentences: &Bound<'_, PyAny>,
    image_embedding: Vec<f64>,
    mode: &str,
    tau: f64,
    tau_high_plus: f64,
    require_positive: bool,
) -> PyResult<Py<PyAny>> {
    let records: Vec<SentenceRecord> = from_py(sentences)?;
    let cfg = FilterConfig {
        mode: parse_enum::<FilterMode>(mode)?,
        tau,
        tau_high_plus,
        require_positive,
        ..Default::default()
    };
    cfg.validate().map_err(py_err)?;
    let out = cef::filter_prior(&records, &image_embedding, &cfg).map_err(py_err)?;
    to_py(py, &out)
}

#[pyfunction]
fn split_sentences(text: &str) -> Vec<String> {
    text::split_sentences(text)
}

#[pyfunction]
fn tokenize(sentence: &str) -> Vec<String> {
    text::tokenize(sentence)
}

#[pyfunction]
fn read_emb1(path: &str) -> PyResult<Vec<Vec<f64>>> {
    io::read_embeddings(path).map(|m| rows(&m)).map_err(py_err)
}

#[pyfunction]
fn write_emb1(path: &str, data: Vec<Vec<f64>>) -> PyResult<()> {
    io::write_embeddings(path, &matrix(data)?).map_err(py_err)
}

/// Runs the pipeline from a config file, writes its outputs and returns the
/// summary.
#[pyfunction]
#[pyo3(signature = (config, workers=None))]
fn run_pipeline(py: Python<'_>, config: &str, workers: Option<usize>) -> PyResult<Py<PyAny>> {
    let mut cfg = PipelineConfig::from_file(config).map_err(py_err)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    let out = py.detach(|| pipeline::run_pipeline(&cfg)).map_err(py_err)?;
    to_py(py, &out.summary)
}

/// Finite-difference gradient check; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (op, seed, eps=1e-4, tol=1e-4))]
fn grad_check(py: Python<'_>, op: &str, seed: u64, eps: f64, tol: f64) -> PyResult<Py<PyAny>> {
    let op = parse_enum::<GradOp>(op)?;
    let report =
        gradcheck::check_random(op, seed, ToyShapes::default(), eps, tol).map_err(py_err)?;
    to_py(py, &report)
}

/// Frontal-guided resampler with seeded parameters.
#[pyclass(module = "sure_med")]
struct Resampler {
    params: ResamplerParams,
}

#[pymethods]
impl Resampler {
    #[new]
    #[pyo3(signature = (seed, n_queries, model_dim, out_dim, init="scaled_gaussian", share_lateral=false))]
    fn new(
        seed: u64,
        n_queries: usize,
        model_dim: usize,
        out_dim: usize,
        init: &str,
        share_lateral: bool,
    ) -> PyResult<Self> {
        let scheme = parse_enum::<InitScheme>(init)?;
        let params = favr::init_params(seed, n_queries, model_dim, out_dim, scheme, share_lateral)
            .map_err(py_err)?;
        Ok(Self { params })
    }

    #[getter]
    fn n_queries(&self) -> usize {
        self.params.n_queries()
    }

    #[getter]
    fn model_dim(&self) -> usize {
        self.params.model_dim()
    }

    #[getter]
    fn out_dim(&self) -> usize {
        self.params.out_dim()
    }

    /// Fused `[n_queries × out_dim]` features as a list of rows.
    #[pyo3(signature = (frontal, lateral=None))]
    fn fuse(
        &self,
        frontal: Vec<Vec<f64>>,
        lateral: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let frontal = matrix(frontal)?;
        let lateral = lateral.map(matrix).transpose()?;
        let z = favr::favr_fuse(&frontal, lateral.as_ref(), &self.params).map_err(py_err)?;
        Ok(rows(&z.z))
    }

    /// Frontal attention matrix `[n_queries × n_frontal]`.
    fn frontal_attention(&self, frontal: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let (_, cache) =
            favr::favr_forward(&matrix(frontal)?, None, &self.params).map_err(py_err)?;
        Ok(rows(cache.frontal_attention()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Resampler(n_queries={}, model_dim={}, out_dim={})",
            self.params.n_queries(),
            self.params.model_dim(),
            self.params.out_dim()
        )
    }
}

#[pymodule]
fn sure_med(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Resampler>()?;
    m.add_function(wrap_pyfunction!(repair_view, m)?)?;
    m.add_function(wrap_pyfunction!(raw_weight, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_weights, m)?)?;
    m.add_function(wrap_pyfunction!(tsl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(filter_prior, m)?)?;
    m.add_function(wrap_pyfunction!(split_sentences, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(read_emb1, m)?)?;
    m.add_function(wrap_pyfunction!(write_emb1, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}

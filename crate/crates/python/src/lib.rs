//! Python bindings. Reports and metrics cross the boundary as plain dicts
//! (via JSON), models and vocabularies as opaque handles.

use bugprio::checkpoint::Checkpoint;
use bugprio::classifier::{metrics as eval_metrics, predict as predict_report};
use bugprio::config::RunConfig;
use bugprio::contrastive::{cl_loss_pairs, AugmentMethod};
use bugprio::corpus::synthetic::{generate, SyntheticSpec};
use bugprio::corpus::{load_corpus, write_corpus, BugReport, Priority};
use bugprio::pipeline;
use bugprio::tokenizer::{self, train_bpe, Vocabulary};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: bugprio::Error) -> PyErr {
    match e {
        bugprio::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_priority(s: &str) -> PyResult<Priority> {
    Priority::ALL
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown priority {s:?}")))
}

#[pyclass(name = "Vocabulary", module = "bugprio_py", frozen)]
pub struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Byte-level BPE trained on `texts` up to `vocab_size` ids.
    #[staticmethod]
    fn train(py: Python<'_>, texts: Vec<String>, vocab_size: usize) -> PyResult<Self> {
        let inner = py
            .detach(|| train_bpe(&texts, vocab_size))
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Vocabulary::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        tokenizer::encode(text, &self.inner)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        tokenizer::decode(&ids, &self.inner).map_err(py_err)
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Vocabulary(size={}, merges={})",
            self.inner.len(),
            self.inner.merges().len()
        )
    }
}

#[pyclass(name = "RunConfig", module = "bugprio_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn desk() -> Self {
        Self {
            inner: RunConfig::desk(),
        }
    }

    #[staticmethod]
    fn paper() -> Self {
        Self {
            inner: RunConfig::paper(),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(path).map_err(py_err)?,
        })
    }

    /// Sets one `key = value` entry; the config is re-validated.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(py_err)?;
        next.validate().map_err(py_err)?;
        self.inner = next;
        Ok(())
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown config key {key:?}")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }
}

#[pyclass(name = "Checkpoint", module = "bugprio_py", frozen)]
pub struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, pyo3::types::PyBytes> {
        pyo3::types::PyBytes::new(py, &self.inner.to_bytes())
    }

    #[getter]
    fn stage(&self) -> &'static str {
        self.inner.stage.as_str()
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn parameter_count(&self) -> usize {
        self.inner
            .model
            .named_tensors()
            .iter()
            .map(|(_, t)| t.data().len())
            .sum()
    }

    /// Priority distribution for one report, e.g. `{"P1": 0.7, ...}`.
    #[pyo3(signature = (vocab, summary, description, max_len=None))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        vocab: &PyVocabulary,
        summary: &str,
        description: &str,
        max_len: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        self.inner.check_vocab(&vocab.inner).map_err(py_err)?;
        let report = BugReport::new("query", summary, description, None).map_err(py_err)?;
        let max_len = max_len.unwrap_or(self.inner.config.finetune.max_len);
        let dist =
            predict_report(&report, &self.inner.model, &vocab.inner, max_len).map_err(py_err)?;
        to_py(py, &dist.probs)
    }

    /// Evaluation report (dict) on the labeled reports of a JSONL file.
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        vocab: &PyVocabulary,
        corpus: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let reports = load_corpus(corpus).map_err(py_err)?;
        let max_len = self.inner.config.finetune.max_len;
        let report = py
            .detach(|| pipeline::run_evaluate(&self.inner, &vocab.inner, &reports, max_len))
            .map_err(py_err)?;
        to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(stage={}, layers={}, d_model={}, vocab={})",
            self.inner.stage,
            self.inner.model.config.layers,
            self.inner.model.config.d_model,
            self.inner.model.config.vocab_size
        )
    }
}

/// Writes a synthetic keyword-labeled corpus to `path`.
#[pyfunction]
#[pyo3(signature = (path, labeled=500, unlabeled=0, seed=0))]
fn generate_corpus(path: &str, labeled: usize, unlabeled: usize, seed: u64) -> PyResult<()> {
    let reports = generate(&SyntheticSpec {
        labeled,
        unlabeled,
        seed,
        ..SyntheticSpec::default()
    });
    write_corpus(path, &reports).map_err(py_err)
}

#[pyfunction]
fn pretrain_mlm(
    py: Python<'_>,
    config: &PyRunConfig,
    vocab: &PyVocabulary,
    corpus: &str,
) -> PyResult<PyCheckpoint> {
    let reports = load_corpus(corpus).map_err(py_err)?;
    let (inner, _) = py
        .detach(|| pipeline::run_mlm(&config.inner, &vocab.inner, &reports, &mut |_| {}))
        .map_err(py_err)?;
    Ok(PyCheckpoint { inner })
}

#[pyfunction]
#[pyo3(signature = (config, vocab, corpus, init, method=None, allow_any_init=false))]
fn pretrain_cl(
    py: Python<'_>,
    config: &PyRunConfig,
    vocab: &PyVocabulary,
    corpus: &str,
    init: &PyCheckpoint,
    method: Option<&str>,
    allow_any_init: bool,
) -> PyResult<PyCheckpoint> {
    let mut cfg = config.inner.clone();
    if let Some(m) = method {
        cfg.cl.method = m.parse::<AugmentMethod>().map_err(py_err)?;
    }
    let reports = load_corpus(corpus).map_err(py_err)?;
    let (inner, _) = py
        .detach(|| {
            pipeline::run_cl(
                &cfg,
                &vocab.inner,
                &reports,
                &init.inner,
                allow_any_init,
                &mut |_| {},
            )
        })
        .map_err(py_err)?;
    Ok(PyCheckpoint { inner })
}

#[pyfunction]
#[pyo3(signature = (config, vocab, train, init, valid=None))]
fn finetune(
    py: Python<'_>,
    config: &PyRunConfig,
    vocab: &PyVocabulary,
    train: &str,
    init: &PyCheckpoint,
    valid: Option<&str>,
) -> PyResult<PyCheckpoint> {
    let train = load_corpus(train).map_err(py_err)?;
    let valid = match valid {
        Some(p) => load_corpus(p).map_err(py_err)?,
        None => Vec::new(),
    };
    let (inner, _) = py
        .detach(|| {
            pipeline::run_finetune(
                &config.inner,
                &vocab.inner,
                &train,
                &valid,
                &init.inner,
                &mut |_| {},
                &mut |_| {},
            )
        })
        .map_err(py_err)?;
    Ok(PyCheckpoint { inner })
}

/// Metrics dict for parallel lists of gold and predicted labels ("P1".."P5").
#[pyfunction]
fn metrics<'py>(
    py: Python<'py>,
    gold: Vec<String>,
    pred: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let gold = gold
        .iter()
        .map(|s| parse_priority(s))
        .collect::<PyResult<Vec<_>>>()?;
    let pred = pred
        .iter()
        .map(|s| parse_priority(s))
        .collect::<PyResult<Vec<_>>>()?;
    to_py(py, &eval_metrics(&gold, &pred).map_err(py_err)?)
}

/// In-batch contrastive loss of (anchor, positive) representation pairs.
#[pyfunction]
#[pyo3(signature = (pairs, tau=0.05))]
fn contrastive_loss(pairs: Vec<(Vec<f64>, Vec<f64>)>, tau: f64) -> PyResult<f64> {
    cl_loss_pairs(&pairs, tau).map_err(py_err)
}

#[pymodule]
fn bugprio_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_mlm, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_cl, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    Ok(())
}

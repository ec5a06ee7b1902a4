//! Python bindings: the BM25 index, the tokenizer and the experiment
//! pipeline. Structured results come back as plain dicts and lists.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use zemi_core::autograd::GradCheckOptions;
use zemi_core::pipeline::parse_grid;
use zemi_core::retrieval::{self, Bm25Params, Document};
use zemi_core::{Error, ExperimentConfig};

fn py_err(e: Error) -> PyErr {
    let msg = format!("[{}] {e}", e.kind());
    match e {
        Error::Config(_) | Error::Template(_) => PyValueError::new_err(msg),
        Error::Io { .. } => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Lowercased word tokens, as used by retrieval and the vocabulary.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    retrieval::tokenize(text)
}

#[pyclass(name = "Bm25Index", module = "zemi", frozen)]
pub struct PyBm25Index {
    inner: retrieval::Bm25Index,
}

#[pymethods]
impl PyBm25Index {
    /// `docs` is a list of `(id, text)` pairs.
    #[new]
    #[pyo3(signature = (docs, k1 = 1.2, b = 0.75))]
    pub fn new(docs: Vec<(String, String)>, k1: f64, b: f64) -> PyResult<Self> {
        let docs = docs.into_iter().map(|(id, text)| Document::new(id, text)).collect();
        let inner = retrieval::Bm25Index::build(docs, Bm25Params { k1, b }).map_err(py_err)?;
        Ok(PyBm25Index { inner })
    }

    #[staticmethod]
    pub fn load(path: &str) -> PyResult<Self> {
        let inner = retrieval::Bm25Index::load(path.as_ref()).map_err(py_err)?;
        Ok(PyBm25Index { inner })
    }

    pub fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(py_err)
    }

    /// Top `k` `(doc_id, score)` pairs for a free-text query.
    #[pyo3(signature = (query, k = 5))]
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        let q = retrieval::tokenize(query);
        self.inner
            .retrieve(&q, k)
            .into_iter()
            .map(|h| (self.inner.doc(h.ordinal).id.clone(), h.score))
            .collect()
    }

    pub fn score(&self, query: &str, doc_id: &str) -> PyResult<f64> {
        let ordinal = self
            .inner
            .docs()
            .iter()
            .position(|d| d.id == doc_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown document {doc_id:?}")))?;
        Ok(self.inner.score(&retrieval::tokenize(query), ordinal))
    }

    pub fn __len__(&self) -> usize {
        self.inner.n_docs()
    }
}

/// One experiment: a config file plus `key=value` overrides.
#[pyclass(name = "Experiment", module = "zemi", frozen)]
pub struct PyExperiment {
    inner: zemi_core::Experiment,
}

#[pymethods]
impl PyExperiment {
    #[new]
    #[pyo3(signature = (config = None, overrides = Vec::new()))]
    pub fn new(config: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        let cfg = ExperimentConfig::load(config.map(AsRef::as_ref), &overrides).map_err(py_err)?;
        Ok(PyExperiment { inner: zemi_core::Experiment::new(cfg) })
    }

    /// Canonical TOML of the resolved config.
    pub fn config_toml(&self) -> String {
        self.inner.cfg.to_toml()
    }

    /// Number of documents and tasks written.
    pub fn synth(&self) -> PyResult<(usize, usize, usize)> {
        let s = self.inner.synth().map_err(py_err)?;
        Ok((s.corpus.len(), s.train.len(), s.eval.len()))
    }

    pub fn index(&self) -> PyResult<usize> {
        Ok(self.inner.index().map_err(py_err)?.n_docs())
    }

    pub fn retrieve(&self) -> PyResult<usize> {
        Ok(self.inner.retrieve().map_err(py_err)?.records.len())
    }

    pub fn train<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let out = self.inner.train().map_err(py_err)?;
        to_py(py, &out)
    }

    #[pyo3(signature = (checkpoint = None))]
    pub fn eval<'py>(&self, py: Python<'py>, checkpoint: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let report = self.inner.eval(checkpoint.map(AsRef::as_ref)).map_err(py_err)?;
        to_py(py, &report)
    }

    #[pyo3(signature = (h = 1e-5, tol = 1e-4))]
    pub fn gradcheck<'py>(&self, py: Python<'py>, h: f64, tol: f64) -> PyResult<Bound<'py, PyAny>> {
        let opts = GradCheckOptions { h, tol, ..Default::default() };
        let report = self.inner.gradcheck(&opts).map_err(py_err)?;
        to_py(py, &report)
    }

    /// `grid` entries look like `"num_augs=1,5"`.
    pub fn ablate<'py>(&self, py: Python<'py>, grid: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
        let grid = parse_grid(&grid).map_err(py_err)?;
        let table = self.inner.ablate(&grid).map_err(py_err)?;
        to_py(py, &table)
    }
}

#[pymodule]
fn zemi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_class::<PyBm25Index>()?;
    m.add_class::<PyExperiment>()?;
    Ok(())
}

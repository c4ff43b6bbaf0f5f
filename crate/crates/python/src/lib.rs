//! Python bindings: slot registries, corpora, training, prediction,
//! evaluation and the gradient check.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use promptqa::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use promptqa::config::RunConfig;
use promptqa::corpus::{corpus_to_jsonl, parse_corpus};
use promptqa::gradcheck::{model_gradcheck, ModelCheckSettings};
use promptqa::metrics::{self, SlotScore};
use promptqa::pipeline::{self, predict_corpus};
use promptqa::synth::gen_synthetic;
use promptqa::trainer::train;

create_exception!(promptqa, PromptQAError, PyException, "Raised for any error from the Rust core.");

fn err(e: promptqa::Error) -> PyErr {
    PromptQAError::new_err(e.to_string())
}

/// Slot questions grouped by event type.
#[pyclass(name = "SlotRegistry", module = "promptqa", frozen)]
struct PySlotRegistry(promptqa::SlotRegistry);

#[pymethods]
impl PySlotRegistry {
    /// The sixteen built-in slots.
    #[staticmethod]
    fn default() -> Self {
        Self(promptqa::SlotRegistry::default_registry())
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        promptqa::SlotRegistry::load(path).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        promptqa::SlotRegistry::parse(text).map(Self).map_err(err)
    }

    /// `event_type/slot` strings in registry order.
    fn ids(&self) -> Vec<String> {
        self.0.ids().iter().map(ToString::to_string).collect()
    }

    fn __len__(&self) -> usize {
        self.0.slots().len()
    }
}

/// A list of annotated tweets (or predictions in the same schema).
#[pyclass(name = "Corpus", module = "promptqa", frozen)]
struct PyCorpus(Vec<promptqa::TweetExample>);

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn synthetic(seed: u64, n: usize, registry: PyRef<'_, PySlotRegistry>) -> PyResult<Self> {
        gen_synthetic(seed, n, &registry.0).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str, registry: PyRef<'_, PySlotRegistry>) -> PyResult<Self> {
        promptqa::load_corpus(path, &registry.0).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_jsonl(text: &str, registry: PyRef<'_, PySlotRegistry>) -> PyResult<Self> {
        parse_corpus(text, &registry.0).map(Self).map_err(err)
    }

    fn to_jsonl(&self) -> String {
        corpus_to_jsonl(&self.0)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        promptqa::save_corpus(path, &self.0).map_err(err)
    }

    fn ids(&self) -> Vec<String> {
        self.0.iter().map(|t| t.id.clone()).collect()
    }

    /// Slot name to file labels (`chunk:i`, `AUTHOR_OF_TWEET`, `YES`, `NO`)
    /// for example `i`.
    fn labels(&self, i: usize) -> PyResult<BTreeMap<String, Vec<String>>> {
        let tweet = self
            .0
            .get(i)
            .ok_or_else(|| PromptQAError::new_err(format!("index {i} out of range for {} examples", self.0.len())))?;
        Ok(tweet.gold.iter().map(|(k, v)| (k.clone(), v.labels())).collect())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Trained (or freshly initialised) model parameters.
#[pyclass(name = "Model", module = "promptqa", frozen)]
struct PyModel(promptqa::ModelParams);

#[pymethods]
impl PyModel {
    /// Trains with a `key = value` config. Returns the model and the mean
    /// loss of every epoch.
    #[staticmethod]
    #[pyo3(signature = (config, corpus, registry, init=None))]
    fn train(
        py: Python<'_>,
        config: &str,
        corpus: PyRef<'_, PyCorpus>,
        registry: PyRef<'_, PySlotRegistry>,
        init: Option<PyRef<'_, PyModel>>,
    ) -> PyResult<(Self, Vec<f64>)> {
        let config = RunConfig::parse(config).map_err(err)?;
        let initial = init.map(|m| m.0.clone());
        let (corpus, registry) = (&corpus.0, &registry.0);
        let out = py
            .detach(|| train(&config.train, &config.model(), corpus, registry, initial))
            .map_err(err)?;
        Ok((Self(out.params), out.losses.iter().map(|e| e.mean_loss).collect()))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_checkpoint(path).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        from_bytes(data).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.0, path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &to_bytes(&self.0))
    }

    /// Predictions for every example, as a corpus whose labels are the
    /// predicted fillers. Pipeline keys may be overridden with `config`.
    #[pyo3(signature = (corpus, registry, config=None))]
    fn predict(
        &self,
        corpus: PyRef<'_, PyCorpus>,
        registry: PyRef<'_, PySlotRegistry>,
        config: Option<&str>,
    ) -> PyResult<PyCorpus> {
        let pipeline = match config {
            Some(text) => RunConfig::parse(text).map_err(err)?.pipeline,
            None => pipeline::PipelineConfig::default(),
        };
        predict_corpus(&self.0, &registry.0, &corpus.0, &pipeline)
            .map(PyCorpus)
            .map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.vocab.len()
    }
}

fn score_dict<'py>(py: Python<'py>, s: &SlotScore) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("tp", s.tp)?;
    d.set_item("fp", s.fp)?;
    d.set_item("fn", s.fn_)?;
    d.set_item("precision", s.precision)?;
    d.set_item("recall", s.recall)?;
    d.set_item("f1", s.f1)?;
    Ok(d)
}

/// Scores `pred` against `gold`. Returns a dict with `slots`, `events`,
/// `micro`, `macro_f1`, `table` and `jsonl`.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    pred: PyRef<'_, PyCorpus>,
    gold: PyRef<'_, PyCorpus>,
    registry: PyRef<'_, PySlotRegistry>,
) -> PyResult<Bound<'py, PyDict>> {
    let report = metrics::evaluate(&pred.0, &gold.0, &registry.0).map_err(err)?;
    let slots = PyDict::new(py);
    for (id, s) in &report.slots {
        slots.set_item(id.to_string(), score_dict(py, s)?)?;
    }
    let events = PyDict::new(py);
    for (event, s) in &report.events {
        events.set_item(event.as_str(), score_dict(py, s)?)?;
    }
    let out = PyDict::new(py);
    out.set_item("slots", slots)?;
    out.set_item("events", events)?;
    out.set_item("micro", score_dict(py, &report.micro)?)?;
    out.set_item("macro_f1", report.macro_f1)?;
    out.set_item("table", report.to_table())?;
    out.set_item("jsonl", report.to_jsonl())?;
    Ok(out)
}

/// Largest relative error between backprop and central differences for
/// one seed of the model gradient check.
#[pyfunction]
#[pyo3(signature = (config, seed=0))]
fn gradcheck(py: Python<'_>, config: &str, seed: u64) -> PyResult<f64> {
    let config = RunConfig::parse(config).map_err(err)?;
    let registry = promptqa::SlotRegistry::default_registry();
    py.detach(|| model_gradcheck(&config.model(), &registry, seed, &ModelCheckSettings::default()))
        .map(|r| r.max_rel_error)
        .map_err(err)
}

/// Token-set Jaccard similarity.
#[pyfunction]
fn jaccard(a: Vec<String>, b: Vec<String>) -> f64 {
    pipeline::jaccard(&a.into_iter().collect(), &b.into_iter().collect())
}

/// The key list of the run config with defaults, as `key = value` text.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_text()
}

#[pymodule(name = "promptqa")]
fn promptqa_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PromptQAError", m.py().get_type::<PromptQAError>())?;
    m.add_class::<PySlotRegistry>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}

//! Python bindings for `mas_sentinel`.

use std::collections::BTreeSet;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyModule;

use mas_sentinel::detector::{detect as core_detect, ScoreReport};
use mas_sentinel::embed::{attribute_graph, tokenize as core_tokenize, EmbedderKind, EmbedderSpec};
use mas_sentinel::encoder::ModelParams;
use mas_sentinel::graph::{generate_topology as core_topology, prune_agents, AttackKind, AttackScenario, DialogueGraph};
use mas_sentinel::metrics::auroc as core_auroc;
use mas_sentinel::pipeline::{evaluate as core_evaluate, PipelineConfig};
use mas_sentinel::render::{render_explanation, RenderFormat};
use mas_sentinel::simulator::{
    generate_corpus as core_corpus, inject_attack as core_inject, propagate as core_propagate, CorpusConfig, PropagationConfig,
};
use mas_sentinel::trainer::{train as core_train, Optimizer, TrainConfig};
use mas_sentinel::Error;

create_exception!(sentinel_py, SentinelError, PyException, "Raised for every library error; the message starts with the error kind.");

fn to_py(err: Error) -> PyErr {
    SentinelError::new_err(format!("{}: {err}", err.kind()))
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

#[pyclass(name = "DialogueGraph", module = "sentinel_py", from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: DialogueGraph,
}

#[pymethods]
impl PyGraph {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        DialogueGraph::from_json_str(text).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        DialogueGraph::load(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.inner.to_json_string()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn graph_id(&self) -> String {
        self.inner.graph_id.clone()
    }

    #[getter]
    fn responses(&self) -> Vec<String> {
        self.inner.agents.iter().map(|a| a.response.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<bool>> {
        self.inner.labels.clone()
    }

    /// `(receiver, sender)` pairs.
    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.adjacency.edges().collect()
    }

    fn prune(&self, flagged: BTreeSet<usize>) -> PyResult<Self> {
        prune_agents(&self.inner, &flagged).map(|inner| Self { inner }).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("DialogueGraph(id={:?}, agents={}, edges={})", self.inner.graph_id, self.inner.len(), self.inner.adjacency.edge_count())
    }
}

#[pyclass(name = "ModelParams", module = "sentinel_py", skip_from_py_object)]
#[derive(Clone)]
struct PyParams {
    inner: ModelParams,
}

#[pymethods]
impl PyParams {
    #[staticmethod]
    fn zeros(dim: usize) -> Self {
        Self { inner: ModelParams::zeros(dim) }
    }

    #[staticmethod]
    #[pyo3(signature = (dim, seed = 0))]
    fn init(dim: usize, seed: u64) -> Self {
        Self {
            inner: ModelParams::init(dim, seed),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ModelParams::from_json_str(text).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        ModelParams::load(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.inner.to_json_string()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

#[pyclass(name = "Embedder", module = "sentinel_py", skip_from_py_object)]
#[derive(Clone)]
struct PyEmbedder {
    spec: EmbedderSpec,
}

#[pymethods]
impl PyEmbedder {
    #[new]
    #[pyo3(signature = (kind = "hashing", dim = 64, seed = 0, endpoint = None, batch_size = 64))]
    fn new(kind: &str, dim: usize, seed: u64, endpoint: Option<String>, batch_size: usize) -> PyResult<Self> {
        let kind = match kind {
            "hashing" => EmbedderKind::Hashing,
            "remote" => EmbedderKind::Remote,
            other => return Err(SentinelError::new_err(format!("invalid_param: unknown embedder `{other}`"))),
        };
        let spec = EmbedderSpec {
            kind,
            dim,
            seed,
            endpoint,
            batch_size,
            ..EmbedderSpec::default()
        };
        spec.validate().map_err(to_py)?;
        Ok(Self { spec })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn embed_sentence(&self, py: Python<'_>, text: &str) -> PyResult<Vec<f64>> {
        let spec = self.spec.clone();
        py.detach(move || spec.build()?.embed_sentence(text)).map_err(to_py)
    }

    fn embed_tokens(&self, py: Python<'_>, tokens: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let spec = self.spec.clone();
        py.detach(move || spec.build()?.embed_tokens(&tokens)).map_err(to_py)
    }
}

#[pyclass(name = "ScoreReport", module = "sentinel_py")]
struct PyReport {
    inner: ScoreReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn graph_id(&self) -> String {
        self.inner.graph_id.clone()
    }

    #[getter]
    fn fused(&self) -> Vec<f64> {
        self.inner.fused.clone()
    }

    #[getter]
    fn raw_s(&self) -> Vec<f64> {
        self.inner.raw_s.clone()
    }

    #[getter]
    fn raw_t(&self) -> Vec<f64> {
        self.inner.raw_t.clone()
    }

    #[getter]
    fn norm_s(&self) -> Vec<f64> {
        self.inner.norm_s.clone()
    }

    #[getter]
    fn norm_t(&self) -> Vec<f64> {
        self.inner.norm_t.clone()
    }

    #[getter]
    fn cov_weight(&self) -> f64 {
        self.inner.cov_weight
    }

    #[getter]
    fn flagged(&self) -> Vec<usize> {
        self.inner.flagged.clone()
    }

    #[getter]
    fn tokens(&self) -> Vec<Vec<String>> {
        self.inner.tokens.clone()
    }

    #[getter]
    fn token_expl(&self) -> Vec<Vec<f64>> {
        self.inner.token_expl.clone()
    }

    #[getter]
    fn warning(&self) -> Option<String> {
        self.inner.warning.clone()
    }

    fn to_json(&self) -> String {
        self.inner.to_json_string()
    }

    /// Heatmap of the flagged agents' tokens, `"ansi"` or `"html"`.
    #[pyo3(signature = (format = "ansi"))]
    fn render(&self, format: &str) -> PyResult<String> {
        let format: RenderFormat = format.parse().map_err(to_py)?;
        render_explanation(&self.inner, format).map_err(to_py)
    }
}

fn default_embedder(embedder: Option<&PyEmbedder>, dim: usize) -> EmbedderSpec {
    embedder.map(|e| e.spec.clone()).unwrap_or_else(|| EmbedderSpec::hashing(dim, 0))
}

#[pyfunction]
#[pyo3(signature = (graph, params, embedder = None, budget = 3))]
fn detect(py: Python<'_>, graph: &PyGraph, params: &PyParams, embedder: Option<&PyEmbedder>, budget: usize) -> PyResult<PyReport> {
    let spec = default_embedder(embedder, params.inner.dim());
    let (graph, params) = (graph.inner.clone(), params.inner.clone());
    py.detach(move || {
        if spec.dim != params.dim() {
            return Err(Error::DimMismatch {
                expected: params.dim(),
                found: spec.dim,
            });
        }
        let attr = attribute_graph(&graph, spec.build()?.as_ref())?;
        core_detect(&attr, &params, budget)
    })
    .map(|inner| PyReport { inner })
    .map_err(to_py)
}

/// Returns `(params, epoch_losses)`.
#[pyfunction]
#[pyo3(signature = (graphs, embedder = None, epochs = 20, batch_size = 8, lr = 1e-4, weight_decay = 2e-4, alpha = 1e-4, seed = 0, optimizer = "adam"))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    graphs: Vec<PyGraph>,
    embedder: Option<&PyEmbedder>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    weight_decay: f64,
    alpha: f64,
    seed: u64,
    optimizer: &str,
) -> PyResult<(PyParams, Vec<f64>)> {
    let optimizer = match optimizer {
        "adam" => Optimizer::default(),
        "sgd" => Optimizer::Sgd,
        other => return Err(SentinelError::new_err(format!("invalid_param: unknown optimizer `{other}`"))),
    };
    let cfg = TrainConfig {
        epochs,
        batch_size,
        lr,
        weight_decay,
        alpha,
        seed,
        optimizer,
        ..TrainConfig::default()
    };
    let spec = default_embedder(embedder, 64);
    let graphs: Vec<DialogueGraph> = graphs.into_iter().map(|g| g.inner).collect();
    let (params, report) = py.detach(move || core_train(&graphs, &spec, &cfg)).map_err(to_py)?;
    Ok((PyParams { inner: params }, report.epoch_losses))
}

#[pyfunction]
#[pyo3(signature = (n_graphs = 200, n_agents = 10, seed = 0, p = 0.3, id_prefix = "g"))]
fn generate_corpus(n_graphs: usize, n_agents: usize, seed: u64, p: f64, id_prefix: &str) -> PyResult<Vec<PyGraph>> {
    let cfg = CorpusConfig {
        n_graphs,
        n_agents,
        seed,
        p,
        id_prefix: id_prefix.to_string(),
        ..CorpusConfig::default()
    };
    core_corpus(&cfg)
        .map(|gs| gs.into_iter().map(|inner| PyGraph { inner }).collect())
        .map_err(to_py)
}

/// Trigger-phrase attack on `attacked_ids`.
#[pyfunction]
#[pyo3(signature = (graph, attacked_ids, phrase_ids = None, seed = 0))]
fn inject_attack(graph: &PyGraph, attacked_ids: Vec<usize>, phrase_ids: Option<Vec<usize>>, seed: u64) -> PyResult<PyGraph> {
    let scenario = AttackScenario {
        kind: AttackKind::TriggerPhrase,
        attacked_ids,
        magnitude: None,
        phrase_ids,
        seed,
    };
    core_inject(&graph.inner, &scenario).map(|inner| PyGraph { inner }).map_err(to_py)
}

/// Compromised agent ids after each round, round 0 first.
#[pyfunction]
#[pyo3(signature = (graph, flagged = BTreeSet::new(), rounds = 3, p_infect = 0.5, seed = 0))]
fn propagate(graph: &PyGraph, flagged: BTreeSet<usize>, rounds: usize, p_infect: f64, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    let prop = PropagationConfig { rounds, p_infect, seed };
    core_propagate(&graph.inner, &flagged, &prop)
        .map(|sets| sets.into_iter().map(|s| s.into_iter().collect()).collect())
        .map_err(to_py)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    core_auroc(&scores, &labels).map_err(to_py)
}

/// Dense matrix with `A[i][j] = 1` when `j` sends to `i`.
#[pyfunction]
#[pyo3(signature = (kind, n, p = 0.3, seed = 0))]
fn generate_topology(kind: &str, n: usize, p: f64, seed: u64) -> PyResult<Vec<Vec<u8>>> {
    let kind = kind.parse().map_err(to_py)?;
    core_topology(kind, n, p, seed).map(|a| a.to_dense()).map_err(to_py)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    core_tokenize(text)
}

/// Evaluation summary as a dict; `config` is a JSON string in the CLI format.
#[pyfunction]
#[pyo3(signature = (graphs, params, config = None))]
fn evaluate<'py>(py: Python<'py>, graphs: Vec<PyGraph>, params: &PyParams, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = match config {
        Some(text) => PipelineConfig::from_json_str(text).map_err(to_py)?,
        None => PipelineConfig::default(),
    };
    let graphs: Vec<DialogueGraph> = graphs.into_iter().map(|g| g.inner).collect();
    let params = params.inner.clone();
    let summary = py.detach(move || core_evaluate(&graphs, &params, &cfg)).map_err(to_py)?;
    json_to_py(py, &summary.to_json_string())
}

#[pymodule]
fn sentinel_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SentinelError", m.py().get_type::<SentinelError>())?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyEmbedder>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(inject_attack, m)?)?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(generate_topology, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

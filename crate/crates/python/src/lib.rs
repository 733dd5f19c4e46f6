//! Python bindings: synthetic workloads, model fitting and loading,
//! perplexity scoring and detection metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use ::syscall_novelty::config::RunConfig;
use ::syscall_novelty::detect;
use ::syscall_novelty::lm::{self, AnyModel, LanguageModel};
use ::syscall_novelty::synth;
use ::syscall_novelty::trace::{self, SyscallEvent};
use ::syscall_novelty::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn config_from(toml: &str) -> PyResult<RunConfig> {
    RunConfig::from_toml_str(toml).map_err(py_err)
}

/// One delimited request: system-call names with their timestamps.
#[pyclass(name = "Request", module = "syscall_novelty", from_py_object)]
#[derive(Clone)]
struct PyRequest {
    inner: trace::Request,
}

#[pymethods]
impl PyRequest {
    #[new]
    #[pyo3(signature = (names, timestamps_ns, label = "id".to_string(), duration_ns = None))]
    fn new(names: Vec<String>, timestamps_ns: Vec<u64>, label: String, duration_ns: Option<u64>) -> PyResult<Self> {
        if names.len() != timestamps_ns.len() {
            return Err(PyValueError::new_err("names and timestamps_ns differ in length"));
        }
        if timestamps_ns.windows(2).any(|w| w[1] < w[0]) {
            return Err(PyValueError::new_err("timestamps_ns must be non-decreasing"));
        }
        let span = match (timestamps_ns.first(), timestamps_ns.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0,
        };
        let events = names
            .into_iter()
            .zip(timestamps_ns)
            .map(|(name, ts_ns)| SyscallEvent {
                ts_ns,
                name,
                ret: 0,
                procname: "app".into(),
                tid: 1,
                pid: 1,
                entry: true,
            })
            .collect();
        Ok(PyRequest {
            inner: trace::Request::new(events, label, duration_ns.unwrap_or(span)),
        })
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.label.clone()
    }

    #[getter]
    fn duration_ns(&self) -> u64 {
        self.inner.duration_ns
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_owned).collect()
    }

    #[getter]
    fn timestamps_ns(&self) -> Vec<u64> {
        self.inner.events.iter().map(|e| e.ts_ns).collect()
    }

    #[getter]
    fn deltas_ns(&self) -> Vec<u64> {
        self.inner.deltas_ns.clone()
    }

    fn truncate(&self, max_len: usize) -> Self {
        PyRequest {
            inner: self.inner.clone().truncate(max_len),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Request(label={:?}, events={}, duration_ns={})",
            self.inner.label,
            self.inner.len(),
            self.inner.duration_ns
        )
    }
}

fn unwrap_requests(requests: &[PyRequest]) -> Vec<trace::Request> {
    requests.iter().map(|r| r.inner.clone()).collect()
}

fn wrap_requests(requests: Vec<trace::Request>) -> Vec<PyRequest> {
    requests.into_iter().map(|inner| PyRequest { inner }).collect()
}

/// A fitted n-gram or neural language model.
#[pyclass(name = "Model", module = "syscall_novelty")]
struct PyModel {
    inner: AnyModel,
}

#[pymethods]
impl PyModel {
    /// Fits an order-`n` model with additive smoothing `alpha`.
    #[staticmethod]
    #[pyo3(signature = (requests, n = 4, alpha = 0.01))]
    fn fit_ngram(requests: Vec<PyRequest>, n: usize, alpha: f64) -> PyResult<Self> {
        let m = lm::ngram_fit(&unwrap_requests(&requests), n, alpha).map_err(py_err)?;
        Ok(PyModel { inner: AnyModel::Ngram(m) })
    }

    /// Trains `model` (lstm, transformer or longformer); hyperparameters
    /// come from a TOML string with the same keys as the CLI config file.
    #[staticmethod]
    #[pyo3(signature = (train, val, model = "lstm", config_toml = ""))]
    fn train(
        py: Python<'_>,
        train: Vec<PyRequest>,
        val: Vec<PyRequest>,
        model: &str,
        config_toml: &str,
    ) -> PyResult<Self> {
        let cfg = config_from(config_toml)?;
        let arch: lm::Architecture = model.parse().map_err(py_err)?;
        let (train, val) = (unwrap_requests(&train), unwrap_requests(&val));
        let outcome = py
            .detach(|| lm::train(&cfg.neural_config(arch), &train, &val, &cfg.train_config()))
            .map_err(py_err)?;
        Ok(PyModel {
            inner: AnyModel::Neural(outcome.model),
        })
    }

    /// Loads a checkpoint; returns the model and its recorded seed.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, u64)> {
        let (inner, seed) = AnyModel::load(&path).map_err(py_err)?;
        Ok((PyModel { inner }, seed))
    }

    #[pyo3(signature = (path, seed = 0))]
    fn save(&self, path: PathBuf, seed: u64) -> PyResult<()> {
        self.inner.save(&path, seed).map_err(py_err)
    }

    #[getter]
    fn architecture(&self) -> &'static str {
        self.inner.architecture()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.name_vocab_size()
    }

    fn log_prob(&self, request: &PyRequest) -> PyResult<f64> {
        detect::sequence_log_prob(&self.inner, &request.inner).map_err(py_err)
    }

    fn perplexity(&self, request: &PyRequest) -> PyResult<f64> {
        detect::perplexity(&self.inner, &request.inner, 0)
            .map(|s| s.perplexity)
            .map_err(py_err)
    }

    /// Perplexity of every request, in order.
    fn score(&self, py: Python<'_>, requests: Vec<PyRequest>) -> PyResult<Vec<f64>> {
        let reqs = unwrap_requests(&requests);
        let scores = py.detach(|| detect::score_requests(&self.inner, &reqs)).map_err(py_err)?;
        Ok(detect::perplexities(&scores))
    }

    /// Mean cross-entropy (nats) and next-call accuracy over `requests`.
    fn evaluate(&self, requests: Vec<PyRequest>) -> PyResult<(f64, f64)> {
        lm::evaluate(&self.inner, &unwrap_requests(&requests)).map_err(py_err)
    }

    /// `(delay_ns, mean_pp, std_pp, baseline_pp)` per delay.
    fn inject_delays(
        &self,
        request: &PyRequest,
        delays_ns: Vec<f64>,
        positions: Vec<usize>,
    ) -> PyResult<Vec<(f64, f64, f64, f64)>> {
        let points = detect::inject_delays(&self.inner, &request.inner, &delays_ns, &positions).map_err(py_err)?;
        Ok(points
            .into_iter()
            .map(|p| (p.delay_ns, p.mean_pp, p.std_pp, p.baseline_pp))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(architecture={:?}, vocab_size={})", self.architecture(), self.vocab_size())
    }
}

/// Generates one split (`train_id`, `val_latency`, ...) of the workload
/// described by `config_toml`.
#[pyfunction]
#[pyo3(signature = (split, config_toml = ""))]
fn generate_split(split: &str, config_toml: &str) -> PyResult<Vec<PyRequest>> {
    let workload = config_from(config_toml)?.workload().map_err(py_err)?;
    let (name, spec, count) = workload
        .splits()
        .into_iter()
        .find(|(name, _, _)| name == split)
        .ok_or_else(|| PyValueError::new_err(format!("unknown split `{split}`")))?;
    synth::generate_split(spec, count, workload.seed, &name)
        .map(wrap_requests)
        .map_err(py_err)
}

/// Writes every split under `out_dir`; returns the request file paths.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml = ""))]
fn generate_dataset(out_dir: PathBuf, config_toml: &str) -> PyResult<Vec<PathBuf>> {
    let workload = config_from(config_toml)?.workload().map_err(py_err)?;
    synth::generate_dataset(&workload, &out_dir).map_err(py_err)
}

#[pyfunction]
fn read_requests(path: PathBuf) -> PyResult<Vec<PyRequest>> {
    trace::read_requests(&path).map(wrap_requests).map_err(py_err)
}

#[pyfunction]
fn read_split(root: PathBuf, split: &str) -> PyResult<Vec<PyRequest>> {
    trace::read_split(&root, split).map(wrap_requests).map_err(py_err)
}

#[pyfunction]
fn write_requests(path: PathBuf, requests: Vec<PyRequest>) -> PyResult<()> {
    trace::write_requests(&path, &unwrap_requests(&requests)).map_err(py_err)
}

/// Delimits a JSON-lines event file into requests.
#[pyfunction]
#[pyo3(signature = (path, label = "id"))]
fn ingest(path: PathBuf, label: &str) -> PyResult<Vec<PyRequest>> {
    let events = trace::read_event_file(&path).map_err(py_err)?;
    let d = trace::delimit_requests(&events, label).map_err(py_err)?;
    Ok(wrap_requests(d.requests))
}

#[pyfunction]
fn perplexity_of(log_prob: f64, n: usize) -> f64 {
    detect::perplexity_of(log_prob, n)
}

#[pyfunction]
fn auroc(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    detect::auroc(&id_scores, &ood_scores).map_err(py_err)
}

/// Threshold maximizing the F-score on the given scores, and that F-score.
#[pyfunction]
fn calibrate_threshold(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<(f64, f64)> {
    let tm = detect::calibrate_threshold(&id_scores, &ood_scores, "ood").map_err(py_err)?;
    Ok((tm.threshold, tm.f_score))
}

/// `(precision, recall, f_score)` of `score >= threshold` flagging novelty.
#[pyfunction]
fn detection_metrics(id_scores: Vec<f64>, ood_scores: Vec<f64>, threshold: f64) -> (f64, f64, f64) {
    let c = detect::Confusion::at(threshold, &id_scores, &ood_scores);
    (c.precision(), c.recall(), c.f_score())
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err("x and y differ in length"));
    }
    Ok(detect::spearman(&x, &y))
}

#[pyfunction]
#[pyo3(signature = (lo_ns = 1e3, hi_ns = 1e6, count = 100))]
fn log_grid(lo_ns: f64, hi_ns: f64, count: usize) -> Vec<f64> {
    detect::log_grid(lo_ns, hi_ns, count)
}

#[pymodule(name = "syscall_novelty")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRequest>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_split, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_requests, m)?)?;
    m.add_function(wrap_pyfunction!(read_split, m)?)?;
    m.add_function(wrap_pyfunction!(write_requests, m)?)?;
    m.add_function(wrap_pyfunction!(ingest, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity_of, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(detection_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(log_grid, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

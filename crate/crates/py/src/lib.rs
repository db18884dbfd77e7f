//! Python bindings for the `llmcc` simulator.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use llmcc::harness::config::{set_path, ExperimentConfig};
use llmcc::harness::metrics::{conservation_violations, summarize, summarize_window, write_outputs, MetricsBundle};
use llmcc::harness::{self, HarnessError};
use llmcc::llmclient::ChatRequest;
use llmcc::llmpolicy::{self, GuardrailConfig, GuardrailMode, LlmDecision};
use llmcc::netsim::TraceShape;
use llmcc::simcore::VirtualTime;
use llmcc::trigger::{AckTriggerConfig, LatencyTriggerConfig};

create_exception!(pyllmcc, LlmccError, PyException);

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    LlmccError::new_err(e.to_string())
}

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::UnknownParameter(_) | HarnessError::Config(_) | HarnessError::DegenerateInput => {
            PyValueError::new_err(e.to_string())
        }
        other => err(other),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Experiment description. Built from JSON; unknown keys are rejected.
#[pyclass(name = "ExperimentConfig", module = "pyllmcc", skip_from_py_object)]
#[derive(Clone)]
struct PyExperimentConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperimentConfig {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => ExperimentConfig::from_json(text).map_err(harness_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(PyExperimentConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyExperimentConfig { inner: ExperimentConfig::load(&path).map_err(harness_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Sets a dotted config path, e.g. `cfg.set("trigger.alpha", 0.6)`.
    fn set(&mut self, path: &str, value: Bound<'_, PyAny>) -> PyResult<()> {
        let py = value.py();
        let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
        let mut v = serde_json::to_value(&self.inner).map_err(err)?;
        set_path(&mut v, path, value).map_err(harness_err)?;
        self.inner = serde_json::from_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(())
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(harness_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s
    }

    #[setter]
    fn set_duration_s(&mut self, d: f64) {
        self.inner.duration_s = d;
    }

    #[getter]
    fn modes(&self) -> Vec<String> {
        self.inner.modes.iter().map(|m| format!("{m:?}")).collect()
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(name={:?}, modes={:?}, seed={})", self.inner.name, self.modes(), self.inner.seed)
    }
}

/// Result of one run.
#[pyclass(name = "MetricsBundle", module = "pyllmcc")]
struct PyMetricsBundle {
    inner: MetricsBundle,
}

#[pymethods]
impl PyMetricsBundle {
    #[getter]
    fn n_flows(&self) -> usize {
        self.inner.flows.len()
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s
    }

    /// Summary as a dict; optionally restricted to `[from_s, to_s)`.
    #[pyo3(signature = (from_s=None, to_s=None))]
    fn summary<'py>(&self, py: Python<'py>, from_s: Option<f64>, to_s: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
        let s = match (from_s, to_s) {
            (None, None) => summarize(&self.inner),
            (f, t) => summarize_window(&self.inner, f.unwrap_or(0.0), t.unwrap_or(self.inner.duration_s)),
        };
        json_to_py(py, &s)
    }

    /// Per-second delivered throughput for one flow, Mb/s.
    fn throughput_mbps(&self, flow: usize) -> PyResult<Vec<f64>> {
        let f = self.inner.flows.get(flow).ok_or_else(|| PyValueError::new_err(format!("no flow {flow}")))?;
        Ok(f.throughput_bins.iter().map(|&b| b as f64 * 8.0 / 1e6).collect())
    }

    /// `(t_s, rtt_ms)` pairs for one flow.
    fn rtt_samples(&self, flow: usize) -> PyResult<Vec<(f64, f64)>> {
        let f = self.inner.flows.get(flow).ok_or_else(|| PyValueError::new_err(format!("no flow {flow}")))?;
        Ok(f.rtt_samples.iter().map(|&(t, r)| (t as f64 / 1e6, r as f64 / 1e3)).collect())
    }

    /// `(t_s, packets)` bottleneck queue samples.
    fn queue_samples(&self) -> Vec<(f64, usize)> {
        self.inner.queue_samples.iter().map(|&(t, q)| (t as f64 / 1e6, q)).collect()
    }

    fn decisions<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner.decisions)
    }

    fn conservation_violations(&self) -> Vec<String> {
        conservation_violations(&self.inner)
    }

    /// Writes summary.json, metrics.csv, queue.csv, decisions.jsonl and bundle.json.
    fn write_outputs(&self, dir: PathBuf) -> PyResult<()> {
        write_outputs(&dir, &self.inner, &summarize(&self.inner)).map_err(harness_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }
}

#[pyfunction]
fn run_experiment(py: Python<'_>, cfg: &PyExperimentConfig) -> PyResult<PyMetricsBundle> {
    let cfg = cfg.inner.clone();
    let inner = py.detach(move || harness::run_experiment(&cfg)).map_err(harness_err)?;
    Ok(PyMetricsBundle { inner })
}

/// NewReno probe run; returns baselines and thresholds as a dict.
#[pyfunction]
fn calibrate<'py>(py: Python<'py>, cfg: &PyExperimentConfig) -> PyResult<Bound<'py, PyAny>> {
    let c = cfg.inner.clone();
    let c = py.detach(move || harness::calibrate(&c)).map_err(harness_err)?;
    json_to_py(py, &c)
}

#[pyfunction]
fn jain_index(x: Vec<f64>) -> PyResult<f64> {
    harness::jain_index(&x).map_err(harness_err)
}

#[pyfunction]
fn latency_threshold_ms(baseline_ms: f64, alpha: f64) -> PyResult<f64> {
    let c = LatencyTriggerConfig::new(VirtualTime::from_secs_f64(baseline_ms / 1e3), alpha).map_err(err)?;
    Ok(c.threshold.as_millis_f64())
}

#[pyfunction]
fn ack_threshold(baseline_acks_10s: u64, beta: f64) -> PyResult<u64> {
    Ok(AckTriggerConfig::new(baseline_acks_10s, beta).map_err(err)?.threshold_acks)
}

/// `(next_cwnd, next_ssthresh)` from a model response; ValueError when unparseable.
#[pyfunction]
fn parse_decision(text: &str) -> PyResult<(u64, u64)> {
    let d = llmpolicy::parse_decision(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((d.next_cwnd, d.next_ssthresh))
}

/// Clamps a proposed window. `mode` is "L" (bounded step) or "G" (floor only).
/// Returns `(cwnd, ssthresh, clamped)`.
#[pyfunction]
fn apply_guardrails(proposed_cwnd: u64, current_cwnd: u64, mode: &str) -> PyResult<(u64, u64, bool)> {
    let mode = match mode {
        "L" | "l" => GuardrailMode::Limited,
        "G" | "g" => GuardrailMode::Generalized,
        other => return Err(PyValueError::new_err(format!("mode must be L or G, got {other:?}"))),
    };
    let d = LlmDecision { next_cwnd: proposed_cwnd, next_ssthresh: proposed_cwnd, raw_text: String::new(), clamped: false };
    let g = llmpolicy::apply_guardrails(&d, current_cwnd, mode, &GuardrailConfig::default());
    Ok((g.next_cwnd, g.next_ssthresh, g.clamped))
}

/// Cassette key for a chat request at temperature 0.
#[pyfunction]
#[pyo3(signature = (model, system_text, user_text, max_tokens=256))]
fn request_key(model: &str, system_text: &str, user_text: &str, max_tokens: u32) -> String {
    ChatRequest {
        model_name: model.into(),
        system_text: system_text.into(),
        user_text: user_text.into(),
        temperature: 0.0,
        max_tokens,
    }
    .key()
}

/// Synthetic bandwidth trace as `[(t_start_s, mbps), ...]`.
#[pyfunction]
#[pyo3(signature = (shape, duration_s=120, seed=1, jitter=0.0))]
fn generate_trace(shape: &str, duration_s: u64, seed: u64, jitter: f64) -> PyResult<Vec<(f64, f64)>> {
    let shape: TraceShape = shape.parse().map_err(|e: llmcc::netsim::NetError| PyValueError::new_err(e.to_string()))?;
    let t = shape.generate(duration_s, seed, jitter).map_err(err)?;
    Ok(t.steps().iter().map(|s| (s.start.as_secs_f64(), s.rate_bps as f64 / 1e6)).collect())
}

#[pymodule]
fn pyllmcc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LlmccError", m.py().get_type::<LlmccError>())?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_class::<PyMetricsBundle>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(jain_index, m)?)?;
    m.add_function(wrap_pyfunction!(latency_threshold_ms, m)?)?;
    m.add_function(wrap_pyfunction!(ack_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(parse_decision, m)?)?;
    m.add_function(wrap_pyfunction!(apply_guardrails, m)?)?;
    m.add_function(wrap_pyfunction!(request_key, m)?)?;
    m.add_function(wrap_pyfunction!(generate_trace, m)?)?;
    Ok(())
}

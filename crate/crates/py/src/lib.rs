use std::collections::BTreeMap;
use std::path::PathBuf;

use h2p_core::baseline::{
    screen_h2ps, simulate_baseline, BaselineConfig, H2pScreenConfig, PerceptronConfig,
};
use h2p_core::cnn::{evaluate, forward_fp, params_from_json, params_to_json, Mode, TrainConfig};
use h2p_core::deploy::{deserialize_helper, serialize_helper, DeployedHelper};
use h2p_core::encoder::{collect_all, encode_index as core_encode_index, EncoderConfig};
use h2p_core::harness::{
    report_to_json, run_crossval as core_run_crossval, ExperimentConfig, HelperModel,
};
use h2p_core::trace::{
    generate_listing1_trace, generate_varposition_trace, read_trace, write_trace, BranchRecord,
    SynthConfig, Trace as CoreTrace, TraceFormat, TraceMeta,
};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn baseline(name: &str) -> PyResult<BaselineConfig> {
    match name {
        "tage" => Ok(BaselineConfig::default()),
        "perceptron" => Ok(BaselineConfig::Perceptron(PerceptronConfig::default())),
        other => Err(PyValueError::new_err(format!(
            "unknown baseline `{other}`, expected tage or perceptron"
        ))),
    }
}

fn mode(name: &str) -> PyResult<Mode> {
    name.parse().map_err(value_err)
}

/// A branch trace: `(ip, taken)` records plus metadata.
#[pyclass(module = "h2p")]
struct Trace {
    inner: CoreTrace,
}

#[pymethods]
impl Trace {
    #[new]
    #[pyo3(signature = (records, workload_id = String::new(), instruction_count = None))]
    fn new(
        records: Vec<(u64, bool)>,
        workload_id: String,
        instruction_count: Option<u64>,
    ) -> PyResult<Self> {
        let records = records
            .into_iter()
            .map(|(ip, t)| BranchRecord::new(ip, t))
            .collect();
        let meta = TraceMeta {
            workload_id,
            generator_seed: None,
            instruction_count,
        };
        Ok(Self {
            inner: CoreTrace::new(records, meta).map_err(value_err)?,
        })
    }

    /// Reads a binary or text trace; the format is detected from the content.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_trace(&path).map_err(|e| PyOSError::new_err(e.to_string()))?,
        })
    }

    /// Writes the trace; `.txt` and `.csv` paths get the text format.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_trace(&self.inner, &path, TraceFormat::from_path(&path))
            .map_err(|e| PyOSError::new_err(e.to_string()))
    }

    fn records(&self) -> Vec<(u64, bool)> {
        self.inner.records.iter().map(|r| (r.ip, r.taken)).collect()
    }

    #[getter]
    fn workload_id(&self) -> String {
        self.inner.meta.workload_id.clone()
    }

    #[getter]
    fn instruction_count(&self) -> Option<u64> {
        self.inner.meta.instruction_count
    }

    fn occurrences(&self, ip: u64) -> usize {
        self.inner.occurrences(ip)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Trace({:?}, {} records)",
            self.inner.meta.workload_id,
            self.inner.len()
        )
    }
}

/// Synthetic Listing-1 trace; with `spread`, the loop trip count varies over
/// `spread` values so the correlated branch moves around in history.
#[pyfunction]
#[pyo3(signature = (num_calls = 10_000, seed = 0, spread = None, history_len = 200))]
fn generate(
    num_calls: usize,
    seed: u64,
    spread: Option<u32>,
    history_len: usize,
) -> PyResult<Trace> {
    let cfg = SynthConfig {
        num_calls,
        seed,
        ..Default::default()
    };
    let inner = match spread {
        None => generate_listing1_trace(&cfg),
        Some(s) => generate_varposition_trace(&cfg, s, history_len).map(|v| v.trace),
    }
    .map_err(value_err)?;
    Ok(Trace { inner })
}

/// `((ip << 1) + taken) & (2^p - 1)`.
#[pyfunction]
fn encode_index(ip: u64, taken: bool, p: u8) -> PyResult<u32> {
    if !(1..=31).contains(&p) {
        return Err(PyValueError::new_err("p must lie in [1, 31]"));
    }
    Ok(core_encode_index(ip, taken, p))
}

/// Bytes of one deployed ternary helper.
#[pyfunction]
fn storage_bytes(p: u8, m: usize, history_len: usize) -> PyResult<u64> {
    h2p_core::deploy::storage_bytes(p, m, history_len).map_err(value_err)
}

/// Per-ip `(predictions, mispredictions)` of a baseline run.
#[pyfunction]
#[pyo3(signature = (trace, baseline = "tage"))]
fn simulate(py: Python<'_>, trace: &Trace, baseline: &str) -> PyResult<BTreeMap<u64, (u64, u64)>> {
    let cfg = self::baseline(baseline)?;
    let stats = py
        .detach(|| {
            let mut p = cfg.build()?;
            simulate_baseline(&trace.inner, p.as_mut())
        })
        .map_err(value_err)?;
    Ok(stats
        .per_ip
        .into_iter()
        .map(|(ip, s)| (ip, (s.predictions, s.mispredictions)))
        .collect())
}

/// H2P ips of a trace under the default screening thresholds.
#[pyfunction]
#[pyo3(signature = (trace, baseline = "tage", accuracy_threshold = 0.99))]
fn screen(
    py: Python<'_>,
    trace: &Trace,
    baseline: &str,
    accuracy_threshold: f64,
) -> PyResult<Vec<u64>> {
    let cfg = self::baseline(baseline)?;
    let screen = H2pScreenConfig {
        accuracy_threshold,
        ..Default::default()
    };
    py.detach(|| {
        let mut p = cfg.build()?;
        let stats = simulate_baseline(&trace.inner, p.as_mut())?;
        screen_h2ps(&stats, trace.inner.meta.instruction_count, &screen)
    })
    .map_err(value_err)
}

/// A trained helper for one branch.
#[pyclass(module = "h2p")]
struct Helper {
    ip: u64,
    params: h2p_core::cnn::CnnParams,
    model: HelperModel,
    train_accuracy: Option<f64>,
}

impl Helper {
    fn from_params(
        ip: u64,
        params: h2p_core::cnn::CnnParams,
        train_accuracy: Option<f64>,
    ) -> PyResult<Self> {
        let model = HelperModel::from_params(&params).map_err(value_err)?;
        Ok(Self {
            ip,
            params,
            model,
            train_accuracy,
        })
    }

    fn deployed(&self) -> PyResult<&DeployedHelper> {
        match &self.model {
            HelperModel::Tp(d) => Ok(d),
            HelperModel::Fp(_) => Err(PyValueError::new_err(
                "only ternary helpers deploy to bit planes",
            )),
        }
    }
}

#[pymethods]
impl Helper {
    #[staticmethod]
    fn from_json(ip: u64, text: &str) -> PyResult<Self> {
        Self::from_params(ip, params_from_json(text).map_err(value_err)?, None)
    }

    #[getter]
    fn ip(&self) -> u64 {
        self.ip
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.model.mode() {
            Mode::Fp => "fp",
            Mode::Tp => "tp",
        }
    }

    #[getter]
    fn train_accuracy(&self) -> Option<f64> {
        self.train_accuracy
    }

    fn to_json(&self) -> String {
        params_to_json(&self.params)
    }

    /// Serialized bit-plane blob of a ternary helper.
    fn to_blob<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = serialize_helper(self.deployed()?).map_err(value_err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    /// Prediction for a window of table indices, oldest first; `None` marks
    /// positions before the trace start.
    fn predict(&self, window: Vec<Option<u32>>) -> PyResult<bool> {
        let slots: Vec<u32> = window
            .into_iter()
            .map(|s| s.unwrap_or(h2p_core::encoder::PAD))
            .collect();
        match &self.model {
            HelperModel::Fp(p) => Ok(forward_fp(p, &slots).map_err(value_err)?.taken),
            HelperModel::Tp(_) => {
                let tp = h2p_core::cnn::TernaryCnnParams::from_params(&self.params)
                    .map_err(value_err)?;
                Ok(h2p_core::cnn::forward_ternary_reference(&tp, &slots)
                    .map_err(value_err)?
                    .taken)
            }
        }
    }

    /// Accuracy on every occurrence of the helper's branch in `trace`.
    fn evaluate(&self, py: Python<'_>, trace: &Trace) -> PyResult<f64> {
        py.detach(|| {
            let data =
                collect_all(&trace.inner, self.ip, &self.params.encoder()).map_err(value_err)?;
            Ok(evaluate(&self.params, &data).map_err(value_err)?.accuracy)
        })
    }

    fn storage_bytes(&self) -> PyResult<u64> {
        Ok(self.deployed()?.storage_bytes())
    }

    fn __repr__(&self) -> String {
        format!("Helper(ip={:#x}, mode={:?})", self.ip, self.mode())
    }
}

/// Trains a helper for `ip` on `trace`.
#[pyfunction]
#[pyo3(signature = (trace, ip, mode = "fp", filters = 32, epochs = 40, sample_budget = 5000, seed = 0, p = 8, history_len = 200))]
#[allow(clippy::too_many_arguments)]
fn train_helper(
    py: Python<'_>,
    trace: &Trace,
    ip: u64,
    mode: &str,
    filters: usize,
    epochs: usize,
    sample_budget: usize,
    seed: u64,
    p: u8,
    history_len: usize,
) -> PyResult<Helper> {
    let mode = self::mode(mode)?;
    let encoder = EncoderConfig { p, history_len };
    let cfg = TrainConfig {
        filters,
        epochs,
        sample_budget,
        ..Default::default()
    };
    let h = py
        .detach(|| h2p_core::harness::train_helper(&trace.inner, ip, mode, &encoder, &cfg, seed))
        .map_err(value_err)?;
    Ok(Helper {
        ip,
        params: h.params,
        model: h.model,
        train_accuracy: Some(h.train_accuracy),
    })
}

/// Checks a helper blob and returns `(p, m, history_len, threshold)`.
#[pyfunction]
fn inspect_blob(blob: &[u8]) -> PyResult<(u8, usize, usize, i64)> {
    let h = deserialize_helper(blob).map_err(value_err)?;
    Ok((h.p(), h.m(), h.history_len(), h.threshold()))
}

/// Runs cross-validation from a TOML config and returns the report as JSON.
#[pyfunction]
fn run_crossval(py: Python<'_>, config_toml: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml_str(config_toml).map_err(value_err)?;
    let report = py.detach(|| core_run_crossval(&cfg)).map_err(value_err)?;
    Ok(report_to_json(&report))
}

#[pymodule]
fn h2p(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Trace>()?;
    m.add_class::<Helper>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(encode_index, m)?)?;
    m.add_function(wrap_pyfunction!(storage_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(screen, m)?)?;
    m.add_function(wrap_pyfunction!(train_helper, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_blob, m)?)?;
    m.add_function(wrap_pyfunction!(run_crossval, m)?)?;
    Ok(())
}

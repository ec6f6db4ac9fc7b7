//! Python bindings: configs, simulation, analysis and the rate model.

use std::collections::HashMap;

use cortexgrid::engine::SpikeLog;
use cortexgrid::harness::{self, AnalyzeOptions, SimConfig};
use cortexgrid::meanfield::{self, MeanFieldSystem};
use cortexgrid::model::{preset_by_name, ColumnSizes, NeuronParams, PopulationKind, PresetName};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: cortexgrid::Error) -> PyErr {
    use cortexgrid::Error as E;
    match e {
        E::Io(_) => PyIOError::new_err(e.to_string()),
        E::Config(_) | E::UnknownPreset { .. } | E::Grid(_) | E::InfeasiblePartition { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Round-trips a serializable value through Python's json module.
fn json<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn population(name: &str) -> PyResult<PopulationKind> {
    match name {
        "F" | "f" => Ok(PopulationKind::F),
        "B" | "b" => Ok(PopulationKind::B),
        "I" | "i" => Ok(PopulationKind::I),
        _ => Err(PyValueError::new_err(format!("population must be F, B or I, got `{name}`"))),
    }
}

/// Simulation config; keys as in config files.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: SimConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text=None, **overrides))]
    fn new(text: Option<&str>, overrides: Option<HashMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut inner = match text {
            Some(t) => SimConfig::parse(t).map_err(to_py)?,
            None => SimConfig::default(),
        };
        for (k, v) in overrides.unwrap_or_default() {
            inner.set(&k, &v.str()?.to_string()).map_err(to_py)?;
        }
        Ok(PyConfig { inner })
    }

    fn set(&mut self, key: &str, value: Bound<'_, PyAny>) -> PyResult<()> {
        self.inner.set(key, &value.str()?.to_string()).map_err(to_py)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.to_map().get(key).cloned().ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let items: Vec<String> = self.inner.to_map().iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("Config({})", items.join(", "))
    }
}

/// Spikes as (global neuron id, time in ms), sorted by time.
#[pyclass(name = "SpikeLog")]
struct PySpikeLog {
    inner: SpikeLog,
}

#[pymethods]
impl PySpikeLog {
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(PySpikeLog { inner: harness::read_spike_log(path.as_ref()).map_err(to_py)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<u32> {
        self.inner.entries.iter().map(|e| e.0).collect()
    }

    fn times(&self) -> Vec<f64> {
        self.inner.entries.iter().map(|e| e.1).collect()
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        self.inner.write_csv(std::io::BufWriter::new(f)).map_err(to_py)
    }
}

/// Builds and runs a network; returns the spike log and run metrics.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<(PySpikeLog, Bound<'py, PyAny>)> {
    let cfg = config.inner.clone();
    let res = py.detach(|| harness::simulate(&cfg)).map_err(to_py)?;
    let metrics = json(py, &res.metrics)?;
    Ok((PySpikeLog { inner: res.output.log }, metrics))
}

/// `run` as on the command line: simulate and write the output directory.
#[pyfunction]
fn run<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let res = py.detach(|| harness::run_command(&cfg)).map_err(to_py)?;
    json(py, &res.metrics)
}

#[pyfunction]
#[pyo3(signature = (config, dry_run=false))]
fn build<'py>(py: Python<'py>, config: &PyConfig, dry_run: bool) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let report = py.detach(|| harness::build_command(&cfg, dry_run)).map_err(to_py)?;
    json(py, &report)
}

/// Rates, spectrum, log-MUA modes and wave speed over `[start_ms, end_ms)`.
#[pyfunction]
#[pyo3(signature = (log, config, start_ms=None, end_ms=None, bin_ms=5.0, segment=256))]
fn analyze<'py>(
    py: Python<'py>,
    log: &PySpikeLog,
    config: &PyConfig,
    start_ms: Option<f64>,
    end_ms: Option<f64>,
    bin_ms: f64,
    segment: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let grid = config.inner.grid().map_err(to_py)?;
    let start = start_ms.unwrap_or(config.inner.transient_ms as f64);
    let end = end_ms.unwrap_or(config.inner.duration_ms as f64);
    let opts = AnalyzeOptions { bin_ms, segment, ..AnalyzeOptions::default() };
    let art = harness::analyze(&log.inner, &grid, start, end, &opts).map_err(to_py)?;
    json(py, &art.report)
}

/// Stationary rate (Hz) of an LIF neuron for drift `mu` (mV/ms) and
/// diffusion `sigma2` (mV^2/ms).
#[pyfunction]
#[pyo3(signature = (mu, sigma2, excitatory=true))]
fn gain_phi(mu: f64, sigma2: f64, excitatory: bool) -> PyResult<f64> {
    let p = if excitatory { NeuronParams::EXCITATORY } else { NeuronParams::INHIBITORY };
    meanfield::gain_phi(mu, sigma2, &p).map_err(to_py)
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    PresetName::ALL.iter().map(|p| p.as_str()).collect()
}

/// Rate model of one column.
#[pyclass(name = "MeanField")]
struct PyMeanField {
    inner: MeanFieldSystem,
}

#[pymethods]
impl PyMeanField {
    #[new]
    #[pyo3(signature = (preset, module_scale=1.0))]
    fn new(preset: &str, module_scale: f64) -> PyResult<Self> {
        let p = preset_by_name(preset).map_err(to_py)?;
        let sizes = ColumnSizes::scaled(module_scale).map_err(to_py)?;
        Ok(PyMeanField { inner: MeanFieldSystem::new(p, sizes) })
    }

    fn input_moments(&self, nu: [f64; 3], c: f64, population: &str) -> PyResult<(f64, f64)> {
        self.inner.input_moments(nu, c, crate::population(population)?).map_err(to_py)
    }

    fn phi(&self, nu: [f64; 3], c: f64, population: &str) -> PyResult<f64> {
        self.inner.phi(nu, c, crate::population(population)?).map_err(to_py)
    }

    fn fixed_points<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let fps = self.inner.fixed_points().map_err(to_py)?;
        json(py, &fps)
    }

    /// F-rate branches of the rate nullcline at each fatigue level.
    fn nullclines(&self, c_values: Vec<f64>) -> PyResult<Vec<(f64, Vec<f64>)>> {
        let s = self.inner.nullclines(&c_values).map_err(to_py)?;
        Ok(s.into_iter().map(|n| (n.c, n.nu)).collect())
    }

    #[pyo3(signature = (init, duration_ms, dt=0.5, record_every=10))]
    fn integrate(&self, init: [f64; 5], duration_ms: f64, dt: f64, record_every: usize) -> PyResult<(Vec<f64>, Vec<[f64; 5]>)> {
        let t = self.inner.integrate(init, duration_ms, dt, record_every).map_err(to_py)?;
        Ok((t.t_ms, t.states))
    }
}

#[pymodule]
fn cortexgrid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySpikeLog>()?;
    m.add_class::<PyMeanField>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(build, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(gain_phi, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    Ok(())
}

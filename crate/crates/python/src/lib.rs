//! Python bindings: configs, training, forecasting, checkpoints and the
//! scoring functions.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use solarbnn_core::cli::{self, ForecastOptions};
use solarbnn_core::dataio::{self, ColumnSpec};
use solarbnn_core::experiment::{self, Checkpoint, ExperimentConfig};
use solarbnn_core::{forecast, metrics, Error};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Config { .. } | Error::InvalidValue(_) | Error::DomainError(_) | Error::ShapeError(_) => {
            PyValueError::new_err(err.to_string())
        }
        Error::Io { .. } | Error::NotFound(_) => PyIOError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

/// Experiment configuration, round-tripped through TOML.
#[pyclass(name = "ExperimentConfig", module = "solarbnn", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, or the given TOML text with `key=value` overrides applied.
    #[new]
    #[pyo3(signature = (toml = None, overrides = Vec::new()))]
    fn new(toml: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        let base = toml.map(str::to_owned).unwrap_or_else(|| ExperimentConfig::default().to_toml());
        let text = experiment::apply_overrides(&base, &overrides).map_err(to_py)?;
        let inner = ExperimentConfig::from_toml(&text).map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        let inner = ExperimentConfig::load_with_overrides(&path, &overrides).map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(hash={})", self.inner.hash())
    }
}

/// A trained model together with the config that produced it.
#[pyclass(name = "Checkpoint", module = "solarbnn")]
pub struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: Checkpoint::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.model.k
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.model.horizon
    }

    #[getter]
    fn bayesian(&self) -> bool {
        self.inner.model.is_bayesian()
    }

    /// Forecast from the last `k` observations (kWh). Returns
    /// `(mean, {level: (lower, upper)})`, clamped at zero.
    #[pyo3(signature = (history, samples = None, levels = None, seed = 0))]
    fn predict(
        &self,
        py: Python<'_>,
        history: Vec<f64>,
        samples: Option<usize>,
        levels: Option<Vec<f64>>,
        seed: u64,
    ) -> PyResult<(Vec<f64>, Vec<(f64, Vec<f64>, Vec<f64>)>)> {
        let cfg = &self.inner.config;
        let samples = samples.unwrap_or(cfg.samples);
        let levels = levels.unwrap_or_else(|| cfg.levels.clone());
        let model = &self.inner.model;
        let out = py
            .detach(|| forecast::msa_predict(model, &history, samples, &levels, seed))
            .map_err(to_py)?;
        let bands = out.bands.into_iter().map(|b| (b.level, b.lower, b.upper)).collect();
        Ok((out.mean, bands))
    }
}

/// Trains per the config and writes the run directory; returns the
/// checkpoint path.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig) -> PyResult<PathBuf> {
    let cfg = config.inner.clone();
    let out = py.detach(|| cli::cmd_train(&cfg)).map_err(to_py)?;
    Ok(out.checkpoint)
}

/// Writes a forecast CSV from a checkpoint and returns its path.
#[pyfunction]
#[pyo3(signature = (checkpoint, output = None, steps = None, samples = None, levels = None, seed = None, series = None, origin = None))]
#[allow(clippy::too_many_arguments)]
fn forecast_csv(
    py: Python<'_>,
    checkpoint: PathBuf,
    output: Option<PathBuf>,
    steps: Option<usize>,
    samples: Option<usize>,
    levels: Option<Vec<f64>>,
    seed: Option<u64>,
    series: Option<PathBuf>,
    origin: Option<String>,
) -> PyResult<PathBuf> {
    let opts = ForecastOptions {
        series,
        origin,
        steps,
        samples,
        levels,
        seed,
        output,
    };
    py.detach(|| cli::cmd_forecast(&checkpoint, &opts)).map_err(to_py)
}

/// Scores a checkpoint on its test split (or on every window of `series`)
/// and returns the scores as a dict-like list of pairs.
#[pyfunction]
#[pyo3(signature = (checkpoint, series = None, output_dir = None))]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    series: Option<PathBuf>,
    output_dir: Option<PathBuf>,
) -> PyResult<Vec<(String, f64)>> {
    let eval = py
        .detach(|| cli::cmd_evaluate(&checkpoint, None, series.as_deref(), output_dir.as_deref()))
        .map_err(to_py)?;
    let s = &eval.scores;
    let mut out = vec![("rmse".to_string(), s.rmse), ("mae".to_string(), s.mae), ("n".to_string(), s.n as f64)];
    if let (Some(p), Some(w)) = (s.pinball_avg, s.winkler) {
        out.push(("pinball_avg".into(), p));
        out.push(("winkler".into(), w));
    }
    for (level, c) in &eval.coverage {
        out.push((format!("coverage{}", (level * 100.0).round()), *c));
    }
    Ok(out)
}

/// Synthetic half-hourly solar series in kWh.
#[pyfunction]
#[pyo3(signature = (days, seed = 0, outlier_rate = 0.02, outlier_scale = 1.0))]
fn synth(days: usize, seed: u64, outlier_rate: f64, outlier_scale: f64) -> PyResult<Vec<f64>> {
    let s = dataio::synth_solar(days, seed, outlier_rate, outlier_scale).map_err(to_py)?;
    Ok(s.values().to_vec())
}

/// Values of a `timestamp,kwh` CSV.
#[pyfunction]
fn load_series(path: PathBuf) -> PyResult<Vec<f64>> {
    let s = dataio::load_csv(&path, &ColumnSpec::default()).map_err(to_py)?;
    Ok(s.values().to_vec())
}

#[pyfunction]
fn pinball(y: f64, y_hat: f64, tau: f64) -> PyResult<f64> {
    metrics::pinball(y, y_hat, tau).map_err(to_py)
}

#[pyfunction]
fn winkler(y: f64, lower: f64, upper: f64, gamma: f64) -> PyResult<f64> {
    metrics::winkler(y, lower, upper, gamma).map_err(to_py)
}

#[pyfunction]
fn rmse(y_hat: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::rmse(&y_hat, &y).map_err(to_py)
}

#[pyfunction]
fn mae(y_hat: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::mae(&y_hat, &y).map_err(to_py)
}

#[pyfunction]
fn coverage(y: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> PyResult<f64> {
    metrics::coverage(&y, &lower, &upper).map_err(to_py)
}

/// The collapsed alpha-beta prior-term coefficient; zero for valid pairs.
#[pyfunction]
fn ab_coefficient(alpha: f64, beta: f64) -> PyResult<f64> {
    solarbnn_core::variational::ab_coefficient(alpha, beta).map_err(to_py)
}

#[pymodule]
fn solarbnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", experiment::VERSION)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(forecast_csv, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(load_series, m)?)?;
    m.add_function(wrap_pyfunction!(pinball, m)?)?;
    m.add_function(wrap_pyfunction!(winkler, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(ab_coefficient, m)?)?;
    Ok(())
}

//! Python bindings: run configs, datasets, training, checkpoints, prediction,
//! the spectral transforms and the self-check.

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use freqcycle::autodiff::RealArray;
use freqcycle::checkpoint;
use freqcycle::config::RunConfig;
use freqcycle::data::{self, Dataset};
use freqcycle::experiment::{self, RunSummary};
use freqcycle::model;
use freqcycle::selfcheck::{self, SelfcheckOptions};
use freqcycle::spectral;
use freqcycle::train;

fn err(e: freqcycle::Error) -> PyErr {
    match e {
        freqcycle::Error::Config(_) | freqcycle::Error::InvalidArgument(_) | freqcycle::Error::Shape { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Flat key/value run configuration; unknown keys raise `ValueError`.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                let value = match value.as_str() {
                    "True" => "true".to_owned(),
                    "False" => "false".to_owned(),
                    _ => value,
                };
                inner.set(&key, &value).map_err(err)?;
            }
        }
        Ok(Self { inner })
    }

    /// Parses the text format written by `dump`.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        inner.apply_str(text).map_err(err)?;
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .get(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key {key:?}")))
    }

    fn dump(&self) -> String {
        self.inner.dump()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(lookback={}, horizon={}, variant={})", self.inner.lookback, self.inner.horizon, self.inner.variant)
    }
}

#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// `rows` is a list of `T` rows with `D` values each.
    #[new]
    #[pyo3(signature = (name, rows, sample_interval_secs=None))]
    fn new(name: &str, rows: Vec<Vec<f64>>, sample_interval_secs: Option<f64>) -> PyResult<Self> {
        let t = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("rows must all have the same length"));
        }
        let values = RealArray::new(vec![t, d], rows.concat()).map_err(err)?;
        let mut inner = Dataset::from_values(name, values).map_err(err)?;
        inner.sample_interval = sample_interval_secs;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
fn load_csv(path: &str) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: data::load_csv(path).map_err(err)?,
    })
}

/// A trained or loaded forecaster.
#[pyclass(name = "Model")]
struct PyModel {
    inner: model::Model,
    run_config: Option<String>,
    summary: Option<String>,
}

fn to_array(x: Vec<Vec<Vec<f64>>>) -> PyResult<RealArray> {
    let b = x.len();
    let d = x.first().map_or(0, Vec::len);
    let l = x.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != d || r.iter().any(|c| c.len() != l)) {
        return Err(PyValueError::new_err("input must be a rectangular (B, D, L) nested list"));
    }
    RealArray::new(vec![b, d, l], x.into_iter().flatten().flatten().collect()).map_err(err)
}

#[pymethods]
impl PyModel {
    /// Forecast for `(B, D, L)` inputs; `starts[b]` is the absolute index of row `b`'s first sample.
    fn predict(&self, x: Vec<Vec<Vec<f64>>>, starts: Vec<u64>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let out = self.inner.predict(&to_array(x)?, &starts).map_err(err)?;
        let (d, h) = (out.shape()[1], out.shape()[2]);
        Ok(out
            .data()
            .chunks_exact(d * h)
            .map(|b| b.chunks_exact(h).map(<[f64]>::to_vec).collect())
            .collect())
    }

    /// Test-split MSE and MAE on `dataset` using the stored (or given) run config.
    #[pyo3(signature = (dataset, config=None))]
    fn evaluate(&self, dataset: &PyDataset, config: Option<&PyRunConfig>) -> PyResult<(f64, f64)> {
        let cfg = match (config, &self.run_config) {
            (Some(c), _) => c.inner.clone(),
            (None, Some(text)) => PyRunConfig::parse(text)?.inner,
            (None, None) => return Err(PyValueError::new_err("model has no stored run config; pass one")),
        };
        let p = experiment::prepare(&cfg, &dataset.inner).map_err(err)?;
        checkpoint::check_compatible(self.inner.config(), &p.model_config).map_err(err)?;
        let task = p.task();
        let m = train::evaluate(&self.inner, &task, task.splits.test.clone()).map_err(err)?;
        Ok((m.mse, m.mae))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut extra = serde_json::Map::new();
        if let Some(c) = &self.run_config {
            extra.insert("run_config".into(), c.clone().into());
        }
        if let Some(s) = &self.summary {
            let v: serde_json::Value = serde_json::from_str(s).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
            extra.insert("summary".into(), v);
        }
        checkpoint::save(&self.inner, path, extra.into()).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Training summary as JSON, if known.
    #[getter]
    fn summary(&self) -> Option<String> {
        self.summary.clone()
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Trains a fresh model; returns the model with its best-validation parameters.
#[pyfunction]
fn train_model(py: Python<'_>, config: &PyRunConfig, dataset: &PyDataset) -> PyResult<PyModel> {
    let (cfg, ds) = (config.inner.clone(), dataset.inner.clone());
    let (model, run_config, summary) = py
        .detach(move || -> freqcycle::Result<_> {
            let p = experiment::prepare(&cfg, &ds)?;
            let out = experiment::run(&p)?;
            let summary = RunSummary::new(&p, out.test, out.report.best_epoch);
            Ok((out.model, p.run.dump(), summary))
        })
        .map_err(err)?;
    Ok(PyModel {
        inner: model,
        run_config: Some(run_config),
        summary: Some(serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))?),
    })
}

#[pyfunction]
fn load_checkpoint(path: &str) -> PyResult<PyModel> {
    let (inner, manifest) = checkpoint::load(path).map_err(err)?;
    Ok(PyModel {
        inner,
        run_config: manifest.extra.get("run_config").and_then(|v| v.as_str()).map(str::to_owned),
        summary: manifest.extra.get("summary").map(|v| v.to_string()),
    })
}

/// Unnormalized half spectrum (`len(x)//2 + 1` bins).
#[pyfunction]
fn rfft(x: Vec<f64>) -> PyResult<Vec<Complex64>> {
    Ok(spectral::rfft(&x).map_err(err)?.bins().to_vec())
}

/// Inverse of `rfft` for a sequence of length `n`.
#[pyfunction]
fn irfft(bins: Vec<Complex64>, n: usize) -> PyResult<Vec<f64>> {
    let s = spectral::Spectrum::new(bins, n).map_err(err)?;
    spectral::irfft(&s, n).map_err(err)
}

/// Runs the numerical self-check; returns `(passed, report_text)`.
#[pyfunction]
#[pyo3(signature = (trials=20))]
fn run_selfcheck(py: Python<'_>, trials: usize) -> (bool, String) {
    let report = py.detach(|| {
        selfcheck::run(&SelfcheckOptions {
            trials,
            ..SelfcheckOptions::default()
        })
    });
    (report.passed(), report.to_string())
}

#[pymodule]
fn freqcycle_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(rfft, m)?)?;
    m.add_function(wrap_pyfunction!(irfft, m)?)?;
    m.add_function(wrap_pyfunction!(run_selfcheck, m)?)?;
    Ok(())
}

//! `ccf` Python module: configuration, the experiment driver, metrics and
//! the prompt builder.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use ccf_core::cf::CfBackend;
use ccf_core::config::{ExperimentConfig, Variant};
use ccf_core::dataset::SplitTag;
use ccf_core::experiment::Experiment;
use ccf_core::trainer::Schedule;
use ccf_core::CcfError;

fn err(e: CcfError) -> PyErr {
    match e {
        CcfError::Config(_) => PyValueError::new_err(e.to_string()),
        CcfError::UnknownId { .. } => PyKeyError::new_err(e.to_string()),
        CcfError::Io(_) | CcfError::MissingArtifact(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> PyResult<T> {
    s.parse().map_err(|_| PyValueError::new_err(format!("invalid {what} {s:?}")))
}

/// Serializes through JSON into plain Python dicts and lists.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn schedule(s: &str) -> PyResult<Schedule> {
    match s {
        "two-stage" => Ok(Schedule::TwoStage),
        "stage1-only" => Ok(Schedule::Stage1Only),
        "end-to-end" => Ok(Schedule::EndToEnd),
        other => Err(PyValueError::new_err(format!("unknown schedule {other:?}"))),
    }
}

#[pyclass(name = "Config", module = "ccf", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, or the TOML text given.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => ExperimentConfig::from_toml(t).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    /// Reads a TOML file or a run manifest.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::load(&path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn with_seed(&self, seed: u64) -> Self {
        PyConfig {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn backend(&self) -> &'static str {
        self.inner.backend.as_str()
    }

    #[setter]
    fn set_backend(&mut self, v: &str) -> PyResult<()> {
        self.inner.backend = parse(v, "backend")?;
        Ok(())
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.to_string()
    }

    #[setter]
    fn set_variant(&mut self, v: &str) -> PyResult<()> {
        self.inner.variant = v.parse().map_err(err)?;
        Ok(())
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, v: PathBuf) {
        self.inner.output_dir = v;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(backend={:?}, variant={:?}, seed={})",
            self.inner.backend.as_str(),
            self.inner.variant.to_string(),
            self.inner.seed
        )
    }
}

/// Runs the pipeline stages against one run directory.
#[pyclass(name = "Experiment", module = "ccf")]
pub struct PyExperiment {
    inner: Experiment,
}

impl PyExperiment {
    fn variant(&self, v: Option<&str>) -> PyResult<Variant> {
        match v {
            Some(s) => s.parse().map_err(err),
            None => Ok(self.inner.config.variant.clone()),
        }
    }
}

#[pymethods]
impl PyExperiment {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        config.inner.validate().map_err(err)?;
        Ok(PyExperiment {
            inner: Experiment::new(config.inner.clone()).map_err(err)?,
        })
    }

    #[getter]
    fn run_dir(&self) -> PathBuf {
        self.inner.run_dir.clone()
    }

    /// Split sizes, users, items and vocabulary size.
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let d = &self.inner.data;
        let users: std::collections::BTreeSet<u32> = d.interactions.iter().map(|x| x.user).collect();
        to_py(
            py,
            &serde_json::json!({
                "interactions": d.interactions.len(),
                "users": users.len(),
                "items": d.catalog.len(),
                "train": d.split.train.len(),
                "validation": d.split.validation.len(),
                "test": d.split.test.len(),
                "vocab": d.vocab.len(),
            }),
        )
    }

    /// Rendered prompt of one interaction, slots shown as placeholders.
    #[pyo3(signature = (user, item, history, style = "hybrid"))]
    fn prompt(&self, user: u32, item: u32, history: Vec<u32>, style: &str) -> PyResult<String> {
        let b = &self.inner.data.builder;
        let p = match style {
            "hybrid" => b.translate(user, item, 0, &history),
            "text-only" => b.text_only(user, item, 0, &history),
            other => return Err(PyValueError::new_err(format!("unknown prompt style {other:?}"))),
        }
        .map_err(err)?;
        Ok(b.dump(&p))
    }

    #[pyo3(signature = (backend = None))]
    fn pretrain_cf<'py>(&self, py: Python<'py>, backend: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let b: CfBackend = match backend {
            Some(s) => parse(s, "backend")?,
            None => self.inner.config.backend,
        };
        let r = py.detach(|| self.inner.pretrain_cf(b)).map_err(err)?;
        to_py(py, &r)
    }

    fn pretrain_lm<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let r = py.detach(|| self.inner.pretrain_lm()).map_err(err)?;
        to_py(py, &r)
    }

    /// Trains a variant; returns `(tag, stage reports)`.
    #[pyo3(signature = (variant = None, schedule = "two-stage"))]
    fn train<'py>(
        &self,
        py: Python<'py>,
        variant: Option<&str>,
        schedule: &str,
    ) -> PyResult<(String, Bound<'py, PyAny>)> {
        let (v, s) = (self.variant(variant)?, self::schedule(schedule)?);
        let (tag, reports) = py.detach(|| self.inner.train(&v, s)).map_err(err)?;
        Ok((tag, to_py(py, &reports)?))
    }

    /// AUC of a trained variant; `split` is "validation" or "test".
    #[pyo3(signature = (variant = None, split = "test", schedule = "two-stage"))]
    fn evaluate(&self, py: Python<'_>, variant: Option<&str>, split: &str, schedule: &str) -> PyResult<(f64, usize)> {
        let (v, s) = (self.variant(variant)?, self::schedule(schedule)?);
        let tag: SplitTag = parse(split, "split")?;
        let r = py.detach(|| self.inner.evaluate(&v, s, tag)).map_err(err)?;
        Ok((r.auc, r.n))
    }

    #[pyo3(signature = (split = "test", backend = None))]
    fn evaluate_cf(&self, split: &str, backend: Option<&str>) -> PyResult<(f64, usize)> {
        let b: CfBackend = match backend {
            Some(s) => parse(s, "backend")?,
            None => self.inner.config.backend,
        };
        let r = self.inner.evaluate_cf(b, parse(split, "split")?).map_err(err)?;
        Ok((r.auc, r.n))
    }

    /// `(item, score)` pairs, best first.
    #[pyo3(signature = (user, items, variant = None, schedule = "two-stage"))]
    fn rank(
        &self,
        py: Python<'_>,
        user: u32,
        items: Vec<u32>,
        variant: Option<&str>,
        schedule: &str,
    ) -> PyResult<Vec<(u32, f64)>> {
        let (v, s) = (self.variant(variant)?, self::schedule(schedule)?);
        py.detach(|| self.inner.rank(&v, s, user, &items)).map_err(err)
    }
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    ccf_core::metrics::auc(&scores, &labels).map_err(err)
}

#[pyfunction]
fn rela_impr(auc: f64, base_auc: f64) -> PyResult<f64> {
    ccf_core::metrics::rela_impr(auc, base_auc).map_err(err)
}

/// Per-example training loss from the yes/no probabilities.
#[pyfunction]
#[pyo3(signature = (p_yes, p_no, label, k = 2.0))]
fn ctr_loss(p_yes: f64, p_no: f64, label: u8, k: f64) -> PyResult<f64> {
    if label > 1 {
        return Err(PyValueError::new_err("label must be 0 or 1"));
    }
    Ok(ccf_core::trainer::ctr_loss(p_yes, p_no, label, k))
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    ccf_core::lm::tokenize(text)
}

#[pymodule]
pub fn ccf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(rela_impr, m)?)?;
    m.add_function(wrap_pyfunction!(ctr_loss, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

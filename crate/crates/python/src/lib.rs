//! Python bindings for `xdiag_core`.
//!
//! Matrices cross the boundary as lists of rows of floats; reports cross as
//! JSON strings so their layout matches the CLI output.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use xdiag_core::diagnose;
use xdiag_core::geometry;
use xdiag_core::probe::{self, Hard, ModelKind, ProbeModel, ProbeSpec, Task, TrainConfig};
use xdiag_core::store::{self as core_store, EmbeddingStore, Modality, StoreMeta};
use xdiag_core::synthlab::{self, Prop1Params};
use xdiag_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_json<T: Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!(
            "row {i} has {} values, expected {d}",
            rows[i].len()
        )));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn modality(name: &str) -> PyResult<Modality> {
    match name {
        "image" => Ok(Modality::Image),
        "text" => Ok(Modality::Text),
        "other" => Ok(Modality::Other),
        _ => Err(PyValueError::new_err(format!(
            "unknown modality {name:?} (expected image, text or other)"
        ))),
    }
}

fn task(name: &str) -> PyResult<Task> {
    match name {
        "multiclass" | "ce" => Ok(Task::Multiclass),
        "multilabel" | "bce" => Ok(Task::Multilabel),
        "quadratic" | "quad" => Ok(Task::Quadratic),
        _ => Err(PyValueError::new_err(format!("unknown task {name:?}"))),
    }
}

fn meta(meta_json: Option<&str>) -> PyResult<StoreMeta> {
    match meta_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(StoreMeta::default()),
    }
}

/// An embedding matrix with its modality and metadata.
#[pyclass(name = "Store", module = "xdiag", frozen)]
struct PyStore {
    inner: EmbeddingStore,
}

#[pymethods]
impl PyStore {
    #[new]
    #[pyo3(signature = (rows, modality, normalized=false, meta_json=None))]
    fn new(
        rows: Vec<Vec<f64>>,
        modality: &str,
        normalized: bool,
        meta_json: Option<&str>,
    ) -> PyResult<Self> {
        let inner = EmbeddingStore::new(
            matrix(rows)?,
            self::modality(modality)?,
            normalized,
            meta(meta_json)?,
        )
        .map_err(py_err)?;
        Ok(PyStore { inner })
    }

    /// Reads an EMB1 store and its `.meta.json` sidecar.
    #[staticmethod]
    fn read(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(PyStore {
            inner: core_store::read_store(&path).map_err(py_err)?,
        })
    }

    fn write(&self, path: std::path::PathBuf) -> PyResult<()> {
        core_store::write_store(&self.inner, &path).map_err(py_err)
    }

    /// The EMB1 bytes of this store (metadata excluded).
    fn encode<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &core_store::encode_store(&self.inner))
    }

    #[staticmethod]
    #[pyo3(signature = (data, meta_json=None))]
    fn decode(data: &[u8], meta_json: Option<&str>) -> PyResult<Self> {
        Ok(PyStore {
            inner: core_store::decode_store(data, meta(meta_json)?).map_err(py_err)?,
        })
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        rows(self.inner.matrix())
    }

    fn meta_json(&self) -> PyResult<String> {
        to_json(self.inner.meta())
    }

    #[getter]
    fn modality(&self) -> &'static str {
        self.inner.modality().as_str()
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.inner.normalized()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.rows()
    }

    /// Centers rows by their mean; returns the centered store and the mean.
    fn close_gap(&self) -> PyResult<(PyStore, Vec<f64>)> {
        let (inner, mean) = geometry::close_gap(&self.inner).map_err(py_err)?;
        Ok((PyStore { inner }, mean.iter().copied().collect()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Store(rows={}, dim={}, modality={:?})",
            self.inner.rows(),
            self.inner.dim(),
            self.inner.modality().as_str()
        )
    }
}

/// A trained linear or MLP probe.
#[pyclass(name = "Model", module = "xdiag", frozen)]
struct PyModel {
    inner: ProbeModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: ProbeModel::from_json(s).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let s = std::fs::read_to_string(&path).map_err(|e| py_err(Error::io(&path, e)))?;
        Self::from_json(&s)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        let s = self.to_json()?;
        std::fs::write(&path, s + "\n").map_err(|e| py_err(Error::io(&path, e)))
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.kind {
            ModelKind::Linear => "linear",
            ModelKind::Mlp => "mlp",
        }
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn closes_gap(&self) -> bool {
        self.inner.gap_closing.is_some()
    }

    /// Scores and hard predictions for a store, read as `modality` (default:
    /// the store's own). Hard predictions are class indices, or per-label
    /// booleans for multilabel probes.
    #[pyo3(signature = (store, modality=None))]
    fn predict(
        &self,
        py: Python<'_>,
        store: &PyStore,
        modality: Option<&str>,
    ) -> PyResult<(Vec<Vec<f64>>, Py<PyAny>)> {
        let preds = self.predictions(store, modality)?;
        let hard = match preds.hard {
            Hard::Classes(v) => v.into_pyobject(py)?.into_any().unbind(),
            Hard::Labels(v) => v.into_pyobject(py)?.into_any().unbind(),
        };
        Ok((rows(&preds.scores), hard))
    }

    /// Metrics on a labelled store, as JSON.
    #[pyo3(signature = (store, modality=None))]
    fn evaluate(&self, store: &PyStore, modality: Option<&str>) -> PyResult<String> {
        let labels = store
            .inner
            .labels()
            .ok_or_else(|| PyValueError::new_err("store has no labels"))?;
        let preds = self.predictions(store, modality)?;
        let report = probe::metrics(
            &preds.scores,
            &preds.hard,
            labels,
            self.inner.task,
            self.inner.class_prior.as_deref(),
        )
        .map_err(py_err)?;
        to_json(&report)
    }

    /// Fraction of paired rows on which the two stores get the same
    /// prediction.
    fn consistency(&self, a: &PyStore, b: &PyStore) -> PyResult<f64> {
        let p = self.predictions(a, None)?;
        let q = self.predictions(b, None)?;
        probe::consistency(&p.hard, &q.hard).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(kind={:?}, input_dim={}, classes={})",
            self.kind(),
            self.inner.input_dim(),
            self.inner.classes()
        )
    }
}

impl PyModel {
    fn predictions(&self, store: &PyStore, modality: Option<&str>) -> PyResult<probe::Predictions> {
        let m = match modality {
            Some(name) => self::modality(name)?,
            None => store.inner.modality(),
        };
        let x = self.inner.store_inputs(&store.inner, m).map_err(py_err)?;
        Ok(probe::predict_prepared(&self.inner, &x))
    }
}

/// Trains a probe on `train`, selecting the checkpoint by loss on `val`.
#[pyfunction]
#[pyo3(signature = (
    train, val, model="linear", loss="ce", hidden=512, close_gap=false,
    seed=0, epochs=25, learning_rate=1e-3, batch_size=256, ridge_lambda=1e-3,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    train: &PyStore,
    val: &PyStore,
    model: &str,
    loss: &str,
    hidden: usize,
    close_gap: bool,
    seed: u64,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    ridge_lambda: f64,
) -> PyResult<PyModel> {
    let task = task(loss)?;
    let spec = match model {
        "linear" => ProbeSpec::linear(task),
        "mlp" => ProbeSpec::mlp(task, hidden),
        _ => return Err(PyValueError::new_err(format!("unknown model {model:?}"))),
    }
    .with_gap_closing(close_gap);
    let cfg = TrainConfig {
        learning_rate,
        epochs,
        batch_size,
        seed,
        ridge_lambda,
        ..TrainConfig::default()
    };
    let inner = py
        .detach(|| probe::train(&spec, &train.inner, &val.inner, &cfg))
        .map_err(py_err)?;
    Ok(PyModel { inner })
}

/// Modality-gap statistics for paired image and text stores, as JSON.
#[pyfunction]
fn gap_report(image: &PyStore, text: &PyStore) -> PyResult<String> {
    to_json(&geometry::gap_report(&image.inner, &text.inner).map_err(py_err)?)
}

/// Pearson and Spearman correlation; `None` when a series is constant.
#[pyfunction]
fn correlation(x: Vec<f64>, y: Vec<f64>) -> PyResult<(Option<f64>, Option<f64>)> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err(format!(
            "series have {} and {} values",
            x.len(),
            y.len()
        )));
    }
    Ok((diagnose::pearson(&x, &y), diagnose::spearman(&x, &y)))
}

/// Paired image and text stores with an exactly constant gap. Returns
/// `(image, text, gap)`.
#[pyfunction]
#[pyo3(signature = (seed=0, d=None, n=None, classes=None))]
fn synth_prop1(
    seed: u64,
    d: Option<usize>,
    n: Option<usize>,
    classes: Option<usize>,
) -> PyResult<(PyStore, PyStore, Vec<f64>)> {
    let defaults = Prop1Params::default();
    let params = Prop1Params {
        d: d.unwrap_or(defaults.d),
        n: n.unwrap_or(defaults.n),
        classes: classes.unwrap_or(defaults.classes),
        seed,
        ..defaults
    };
    let w = synthlab::gen_prop1(&params).map_err(py_err)?;
    Ok((
        PyStore { inner: w.image },
        PyStore { inner: w.text },
        w.gap.iter().copied().collect(),
    ))
}

/// Residual of the spectral-loss identity on a random instance.
#[pyfunction]
fn spectral_identity_check(n: usize, d: usize, seed: u64) -> PyResult<f64> {
    synthlab::spectral_identity_check(n, d, seed).map_err(py_err)
}

/// Residual of the class-mean transfer identity on a class-blocked graph.
#[pyfunction]
fn classmean_check(n: usize, m: usize, d: usize, classes: usize, seed: u64) -> PyResult<f64> {
    synthlab::classmean_check(n, m, d, classes, seed).map_err(py_err)
}

/// Runs the command-line interface with `args` (program name excluded) and
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("xdiag".to_string()).chain(args).collect();
    py.detach(|| xdiag_core::cli::run(argv))
}

#[pymodule]
fn xdiag(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStore>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gap_report, m)?)?;
    m.add_function(wrap_pyfunction!(correlation, m)?)?;
    m.add_function(wrap_pyfunction!(synth_prop1, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_identity_check, m)?)?;
    m.add_function(wrap_pyfunction!(classmean_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}

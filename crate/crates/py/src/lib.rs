//! Python bindings: process presets, dataset sampling and containers,
//! training, checkpoints, metrics and the spectral sweep.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use numpy::{PyArray1, PyArrayMethods, PyReadonlyArray2, PyReadonlyArray3, PyUntypedArrayMethods};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use child::cli;
use child::dataset::{export_dataset, import_dataset};
use child::eval::{self, Correlation, EditScope};
use child::model::{ChildModel, ModelConfig, ObsNormalizer};
use child::process::{build_process, preset, GroundTruthSeries, ProcessSpec};
use child::spectral::{minimal_window_sweep, two_layer_min_window};
use child::train::{self, load_checkpoint, save_checkpoint, TrainConfig, TrainState};

fn py_err(e: child::Error) -> PyErr {
    match e {
        child::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        child::Error::Config(_) | child::Error::Shape(_) | child::Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_numpy3<'py>(py: Python<'py>, a: &Array3<f64>) -> PyResult<Bound<'py, PyAny>> {
    let shape = a.dim();
    let flat = PyArray1::from_vec(py, a.iter().copied().collect());
    Ok(flat.reshape([shape.0, shape.1, shape.2])?.into_any())
}

fn to_numpy2<'py>(py: Python<'py>, a: &Array2<f64>) -> PyResult<Bound<'py, PyAny>> {
    let shape = a.dim();
    let flat = PyArray1::from_vec(py, a.iter().copied().collect());
    Ok(flat.reshape([shape.0, shape.1])?.into_any())
}

fn from_numpy3(a: &PyReadonlyArray3<f64>) -> PyResult<Array3<f64>> {
    let s = a.shape();
    let data = a.to_vec().map_err(|e| PyValueError::new_err(e.to_string()))?;
    Array3::from_shape_vec((s[0], s[1], s[2]), data).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_numpy2(a: &PyReadonlyArray2<f64>) -> PyResult<Array2<f64>> {
    let s = a.shape();
    let data = a.to_vec().map_err(|e| PyValueError::new_err(e.to_string()))?;
    Array2::from_shape_vec((s[0], s[1]), data).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Process specification; build with `ProcessSpec.preset("A")` or from JSON.
#[pyclass(name = "ProcessSpec", from_py_object)]
#[derive(Clone)]
struct PyProcessSpec {
    inner: ProcessSpec,
}

#[pymethods]
impl PyProcessSpec {
    #[staticmethod]
    #[pyo3(signature = (name, seed = 0))]
    fn preset(name: &str, seed: u64) -> PyResult<Self> {
        let mut inner = preset(name).map_err(py_err)?;
        inner.seed = seed;
        Ok(PyProcessSpec { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ProcessSpec = serde_json::from_str(text).map_err(json_err)?;
        inner.validate().map_err(py_err)?;
        Ok(PyProcessSpec { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }

    /// Latent dims, top layer first.
    #[getter]
    fn dims_per_layer(&self) -> Vec<usize> {
        self.inner.dims_per_layer.clone()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn default_seq_length(&self) -> usize {
        self.inner.default_seq_length()
    }

    /// Samples `num_sequences` sequences from the process.
    #[pyo3(signature = (num_sequences, seq_length = None, seed = 0))]
    fn sample(&self, num_sequences: usize, seq_length: Option<usize>, seed: u64) -> PyResult<PyDataset> {
        let process = build_process(&self.inner).map_err(py_err)?;
        let t = seq_length.unwrap_or_else(|| self.inner.default_seq_length());
        let inner = process.sample_series(num_sequences, t, seed).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    fn __repr__(&self) -> String {
        format!("ProcessSpec(dims_per_layer={:?}, seed={})", self.inner.dims_per_layer, self.inner.seed)
    }
}

/// Sampled observations with their ground-truth latents.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: GroundTruthSeries,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: import_dataset(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        export_dataset(&self.inner, &path).map_err(py_err)
    }

    /// Observations `[N, T, obs_dim]`.
    #[getter]
    fn observations<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_numpy3(py, &self.inner.observations)
    }

    /// True latents of `layer` (bottom = 0), `[N, T, n_l]`.
    fn latents<'py>(&self, py: Python<'py>, layer: usize) -> PyResult<Bound<'py, PyAny>> {
        if layer >= self.inner.num_layers() {
            return Err(PyValueError::new_err(format!("layer {layer} out of range")));
        }
        to_numpy3(py, &self.inner.layer(layer))
    }

    /// Valid dims per layer, bottom layer first.
    #[getter]
    fn layer_dims(&self) -> Vec<usize> {
        self.inner.layer_dims()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint.clone()
    }

    #[getter]
    fn spec(&self) -> PyProcessSpec {
        PyProcessSpec { inner: self.inner.spec.clone() }
    }

    fn __len__(&self) -> usize {
        self.inner.num_sequences()
    }
}

/// Trained model with its observation scaling and training history.
#[pyclass(name = "Checkpoint", unsendable)]
struct PyCheckpoint {
    state: TrainState,
    best: ChildModel,
}

impl PyCheckpoint {
    fn new(state: TrainState) -> PyResult<Self> {
        let best = state.best_model().map_err(py_err)?;
        Ok(PyCheckpoint { state, best })
    }

    fn normalizer(&self) -> &ObsNormalizer {
        &self.state.normalizer
    }
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        PyCheckpoint::new(load_checkpoint(&path, None).map_err(py_err)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.state, &path).map_err(py_err)
    }

    /// Per-epoch metrics as a JSON list.
    fn metrics_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.state.metrics).map_err(json_err)
    }

    fn model_config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.best.config()).map_err(json_err)
    }

    /// Posterior means per layer (bottom first) for raw observations.
    fn encode<'py>(&self, py: Python<'py>, observations: PyReadonlyArray3<f64>) -> PyResult<Vec<Bound<'py, PyAny>>> {
        let x = self.normalizer().apply(from_numpy3(&observations)?.view());
        let stack = self.best.encode_context(x.view()).map_err(py_err)?;
        stack.mean.iter().map(|m| to_numpy3(py, m)).collect()
    }

    /// Samples `(latents, observations)` from the learned prior and decoder,
    /// observations in data units.
    #[pyo3(signature = (num_sequences, seq_length, seed = 0))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        num_sequences: usize,
        seq_length: usize,
        seed: u64,
    ) -> PyResult<(Vec<Bound<'py, PyAny>>, Bound<'py, PyAny>)> {
        let (z, x) = self.best.generate(num_sequences, seq_length, seed).map_err(py_err)?;
        let z = z.iter().map(|a| to_numpy3(py, a)).collect::<PyResult<Vec<_>>>()?;
        Ok((z, to_numpy3(py, &self.normalizer().invert(x.view()))?))
    }

    /// Evaluation report as JSON.
    #[pyo3(signature = (dataset, spearman = false, generated = 0, seed = 0))]
    fn evaluate(&self, dataset: &PyDataset, spearman: bool, generated: usize, seed: u64) -> PyResult<String> {
        let method = if spearman { Correlation::Spearman } else { Correlation::Pearson };
        let report = eval::evaluate_model(&self.best, self.normalizer(), &dataset.inner, method, generated, seed).map_err(py_err)?;
        report.to_json().map_err(py_err)
    }

    /// Decoded windows for a sweep of one latent component; returns
    /// `(series [G, T, obs_dim], per-feature change)`.
    #[pyo3(signature = (window, layer, component, grid, step = None))]
    fn interpolate<'py>(
        &self,
        py: Python<'py>,
        window: PyReadonlyArray2<f64>,
        layer: usize,
        component: usize,
        grid: Vec<f64>,
        step: Option<usize>,
    ) -> PyResult<(Bound<'py, PyAny>, Vec<f64>)> {
        let w = from_numpy2(&window)?;
        let scope = step.map_or(EditScope::AllSteps, EditScope::Step);
        let r = eval::interpolate_latent(&self.best, self.normalizer(), w.view(), layer, component, scope, &grid).map_err(py_err)?;
        let views: Vec<_> = r.series.iter().map(|s| s.view()).collect();
        let stacked = ndarray::stack(ndarray::Axis(0), &views).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok((to_numpy3(py, &stacked)?, r.feature_change))
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    #[getter]
    fn best_val_mcc(&self) -> Option<f64> {
        self.state.best.as_ref().map(|b| b.val_mcc)
    }
}

/// Trains a model on `dataset`. `train_config` and `model_config` are JSON
/// objects; missing keys take their defaults.
#[pyfunction]
#[pyo3(signature = (dataset, train_config = None, model_config = None, out_dir = None))]
fn train_model(
    dataset: &PyDataset,
    train_config: Option<&str>,
    model_config: Option<&str>,
    out_dir: Option<PathBuf>,
) -> PyResult<PyCheckpoint> {
    let tc: TrainConfig = match train_config {
        Some(t) => serde_json::from_str(t).map_err(json_err)?,
        None => TrainConfig::default(),
    };
    let mc: ModelConfig = match model_config {
        Some(m) => serde_json::from_str(m).map_err(json_err)?,
        None => ModelConfig::for_process(&dataset.inner.spec),
    };
    let state = train::train(&dataset.inner, &mc, &tc, out_dir.as_deref()).map_err(py_err)?;
    PyCheckpoint::new(state)
}

/// `(mcc, permutation)` between `[S, d]` arrays of true and estimated latents.
#[pyfunction]
#[pyo3(signature = (z_true, z_est, spearman = false))]
fn compute_mcc(z_true: PyReadonlyArray2<f64>, z_est: PyReadonlyArray2<f64>, spearman: bool) -> PyResult<(f64, Vec<usize>)> {
    let method = if spearman { Correlation::Spearman } else { Correlation::Pearson };
    let r = eval::compute_mcc(from_numpy2(&z_true)?.view(), from_numpy2(&z_est)?.view(), method).map_err(py_err)?;
    Ok((r.mcc, r.permutation))
}

/// Summed absolute difference of the feature correlation matrices of two
/// `[N, T, n]` sets.
#[pyfunction]
fn correlational_score(real: PyReadonlyArray3<f64>, generated: PyReadonlyArray3<f64>) -> PyResult<f64> {
    eval::correlational_score(from_numpy3(&real)?.view(), from_numpy3(&generated)?.view()).map_err(py_err)
}

/// Pooled `|correlation|` matrix, rows true, columns estimated.
#[pyfunction]
#[pyo3(signature = (z_true, z_est, spearman = false))]
fn correlation_matrix<'py>(
    py: Python<'py>,
    z_true: PyReadonlyArray2<f64>,
    z_est: PyReadonlyArray2<f64>,
    spearman: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let method = if spearman { Correlation::Spearman } else { Correlation::Pearson };
    let r = eval::compute_mcc(from_numpy2(&z_true)?.view(), from_numpy2(&z_est)?.view(), method).map_err(py_err)?;
    to_numpy2(py, &r.corr_matrix)
}

/// Minimal-window sweep on the built-in two-layer chain:
/// list of `(W, rank_ok, error)`.
#[pyfunction]
#[pyo3(signature = (max_window = 3, seed = 0))]
fn spectral_sweep(max_window: usize, seed: u64) -> PyResult<Vec<(usize, bool, Option<f64>)>> {
    if max_window == 0 {
        return Err(PyValueError::new_err("max_window must be >= 1"));
    }
    let rows = minimal_window_sweep(&two_layer_min_window(), 1..=max_window, seed).map_err(py_err)?;
    Ok(rows.into_iter().map(|r| (r.half_window, r.rank_ok, r.error)).collect())
}

/// Runs the command-line front end with `args` (without the program name);
/// returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    use clap::Parser;
    let argv = std::iter::once("child".to_string()).chain(args);
    match cli::Cli::try_parse_from(argv) {
        Ok(c) => match cli::run(c) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

#[pymodule]
#[pyo3(name = "child")]
fn child_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProcessSpec>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(compute_mcc, m)?)?;
    m.add_function(wrap_pyfunction!(correlational_score, m)?)?;
    m.add_function(wrap_pyfunction!(correlation_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("PRESETS", child::process::PRESETS.to_vec())?;
    Ok(())
}

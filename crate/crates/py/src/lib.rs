use std::path::PathBuf;

use apn_core::ada::{self, AdaConfig};
use apn_core::harness::gradcheck::{self as gc, Scope};
use apn_core::harness::{self, ExperimentConfig};
use apn_core::optim::{Sgd, SgdState};
use apn_core::pyramid::{ApnModel, PyramidConfig, VideoClip};
use apn_core::rng::rng_from_seed;
use apn_core::synthdg::{self, io, BenchmarkSpec};
use apn_core::{ApnError, DType};
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;

fn err(e: ApnError) -> PyErr {
    match e {
        ApnError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_json<T: DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("bad config: {e}"))),
    }
}

fn parse_dtype(s: &str) -> PyResult<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(PyValueError::new_err(format!("unknown dtype `{s}`, expected f32 or f64"))),
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

/// Dense row-major tensor. Values are stored as f64 and rounded to the
/// declared precision.
#[pyclass(module = "apn", name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor(apn_core::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (dims, data, dtype = "f64"))]
    fn new(dims: Vec<usize>, data: Vec<f64>, dtype: &str) -> PyResult<Self> {
        Ok(PyTensor(apn_core::Tensor::new(&dims, data, parse_dtype(dtype)?).map_err(err)?))
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.0.dims().to_vec()
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        dtype_name(self.0.dtype())
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dims={:?}, dtype={})", self.0.dims(), dtype_name(self.0.dtype()))
    }
}

/// Synthetic video domain-generalization benchmark.
#[pyclass(module = "apn", name = "Benchmark")]
struct PyBenchmark(synthdg::Benchmark);

#[pymethods]
impl PyBenchmark {
    #[staticmethod]
    #[pyo3(signature = (spec_json = None))]
    fn generate(spec_json: Option<&str>) -> PyResult<Self> {
        let spec: BenchmarkSpec = parse_json(spec_json)?;
        Ok(PyBenchmark(synthdg::generate_benchmark(&spec).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyBenchmark(io::read_dataset(&path).map_err(err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_dataset(&self.0, &path).map_err(err)
    }

    fn split_len(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    #[getter]
    fn target_domains(&self) -> Vec<usize> {
        self.0.targets.iter().map(|(d, _)| *d).collect()
    }

    /// `(frames, category, domain_id)` of clip `index` in `split`, which is
    /// `train`, `val` or `target:<domain>`.
    fn clip(&self, split: &str, index: usize) -> PyResult<(PyTensor, usize, usize)> {
        let c = self
            .split(split)?
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("clip {index} out of range")))?;
        Ok((PyTensor(c.frames.clone()), c.category, c.domain_id))
    }
}

impl PyBenchmark {
    fn split(&self, split: &str) -> PyResult<&[VideoClip]> {
        match split {
            "train" => Ok(&self.0.source_train),
            "val" => Ok(&self.0.source_val),
            s => s
                .strip_prefix("target:")
                .and_then(|d| d.parse::<usize>().ok())
                .and_then(|d| self.0.target(d))
                .ok_or_else(|| PyValueError::new_err(format!("unknown split `{s}`"))),
        }
    }
}

/// One pyramid network with its own SGD state.
#[pyclass(module = "apn", name = "Model")]
struct PyModel {
    model: ApnModel,
    sgd: Sgd,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config_json = None, seed = 0, learning_rate = 0.001))]
    fn new(config_json: Option<&str>, seed: u64, learning_rate: f64) -> PyResult<Self> {
        let config: PyramidConfig = parse_json(config_json)?;
        let model = ApnModel::new(config, &mut rng_from_seed(seed)).map_err(err)?;
        Self::with_sgd(model, learning_rate)
    }

    #[staticmethod]
    #[pyo3(signature = (path, config_json = None, learning_rate = 0.001))]
    fn load(path: PathBuf, config_json: Option<&str>, learning_rate: f64) -> PyResult<Self> {
        let config: PyramidConfig = parse_json(config_json)?;
        Self::with_sgd(harness::load_model(&config, &path).map_err(err)?, learning_rate)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        harness::save_checkpoint(&self.model.params, &path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.model.params.num_values()
    }

    fn param_names(&self) -> Vec<String> {
        self.model.params.iter().map(|(n, _)| n.to_string()).collect()
    }

    fn param(&self, name: &str) -> PyResult<PyTensor> {
        self.model
            .params
            .by_name(name)
            .map(|t| PyTensor(t.clone()))
            .ok_or_else(|| PyValueError::new_err(format!("no parameter `{name}`")))
    }

    /// Class probabilities of a `[T, H, W, C]` clip in eval mode.
    fn predict_proba(&self, frames: &PyTensor) -> PyResult<Vec<f64>> {
        let clip = VideoClip { frames: frames.0.clone(), category: 0, domain_id: 0, clip_id: 0 };
        self.model.predict_proba(&clip).map_err(err)
    }

    /// One minimax step on a minibatch; returns the step metrics.
    #[pyo3(signature = (clips, labels, ada_json = None, epoch = 0, seed = 0))]
    fn train_step<'py>(
        &mut self,
        py: Python<'py>,
        clips: Vec<PyTensor>,
        labels: Vec<usize>,
        ada_json: Option<&str>,
        epoch: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        if clips.len() != labels.len() {
            return Err(PyValueError::new_err("clips and labels differ in length"));
        }
        let cfg: AdaConfig = parse_json(ada_json)?;
        let batch: Vec<VideoClip> = clips
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (t, y))| VideoClip { frames: t.0, category: y, domain_id: 0, clip_id: i })
            .collect();
        let m = ada::train_step(&mut self.model, &mut self.sgd, &batch, &cfg, epoch, &mut rng_from_seed(seed), &mut |_| {})
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("source_loss", m.source_loss)?;
        d.set_item("source_accuracy", m.source_correct as f64 / m.items.max(1) as f64)?;
        for (level, v) in &m.adv_loss {
            d.set_item(format!("adv_loss_{level}"), v)?;
        }
        for (level, v) in &m.adv_cost {
            d.set_item(format!("cost_{level}"), v)?;
        }
        Ok(d)
    }
}

impl PyModel {
    fn with_sgd(model: ApnModel, learning_rate: f64) -> PyResult<Self> {
        let state = SgdState { learning_rate, ..SgdState::default() };
        state.validate().map_err(err)?;
        let sgd = Sgd::new(state, model.params.len());
        Ok(PyModel { model, sgd })
    }
}

/// Train an ensemble from a JSON experiment config; writes metrics,
/// checkpoints and `run.json` under `out` when given.
#[pyfunction]
#[pyo3(signature = (config_json = None, out = None))]
fn run_experiment<'py>(py: Python<'py>, config_json: Option<&str>, out: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let cfg: ExperimentConfig = parse_json(config_json)?;
    cfg.validate().map_err(err)?;
    let r = harness::run_experiment(&cfg, out.as_deref()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("ensemble_val_accuracy", r.ensemble_val_accuracy)?;
    d.set_item("ensemble_target", r.ensemble_target.clone())?;
    d.set_item("mean_target_accuracy", r.mean_target_accuracy())?;
    d.set_item("best_epochs", r.members.iter().map(|m| m.best_epoch).collect::<Vec<_>>())?;
    Ok(d)
}

/// Finite-difference gradient checks; returns one dict per check.
#[pyfunction]
#[pyo3(signature = (scopes = vec!["kernels".to_string()], include_f32 = false, seed = 7))]
fn gradcheck<'py>(py: Python<'py>, scopes: Vec<String>, include_f32: bool, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let scopes = scopes.iter().map(|s| s.parse::<Scope>()).collect::<Result<Vec<_>, _>>().map_err(err)?;
    let report = gc::gradcheck(&scopes, include_f32, seed).map_err(err)?;
    report
        .entries
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("scope", e.scope.name())?;
            d.set_item("name", &e.name)?;
            d.set_item("dtype", dtype_name(e.dtype))?;
            d.set_item("max_rel_err", e.max_rel_err)?;
            d.set_item("tolerance", e.tolerance)?;
            d.set_item("passed", e.passed)?;
            Ok(d)
        })
        .collect()
}

/// `½ · mean ‖r − r0‖²` for equal labels.
#[pyfunction]
fn transport_cost(r: &PyTensor, r0: &PyTensor, y: usize, y0: usize) -> PyResult<f64> {
    ada::transport_cost_value(&r.0, &r0.0, y, y0).map_err(err)
}

#[pyfunction]
fn read_manifest(path: PathBuf) -> PyResult<String> {
    let m = io::read_manifest(&path).map_err(err)?;
    serde_json::to_string(&m).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn apn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyBenchmark>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(transport_cost, m)?)?;
    m.add_function(wrap_pyfunction!(read_manifest, m)?)?;
    Ok(())
}

//! Python bindings for the FCViT reference implementation.
//!
//! Tensors cross the boundary as flat `list[float]` plus a shape tuple,
//! row-major, matching `Tensor`'s layout; reshape into numpy on the
//! Python side with `np.asarray(data, dtype).reshape(shape)`.

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fcvit_core::analysis;
use fcvit_core::data::{generate, ToyDatasetSpec};
use fcvit_core::gradcheck;
use fcvit_core::model::{Model as CoreModel, ModelConfig, PRESET_NAMES};
use fcvit_core::tensor::Tensor;
use fcvit_core::train::{evaluate_accuracy, train_toy, TrainConfig};

fn runtime_err(e: fcvit_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn resolve_config(preset: &str) -> PyResult<ModelConfig> {
    ModelConfig::preset(preset).ok_or_else(|| {
        PyKeyError::new_err(format!(
            "unknown preset {preset:?}, expected one of {}",
            PRESET_NAMES.join(", ")
        ))
    })
}

fn tensor_from_parts(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Tensor<f32>> {
    Tensor::new(&shape, data).map_err(runtime_err)
}

/// Built-in configuration names.
#[pyfunction]
fn presets() -> Vec<String> {
    PRESET_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Learnable parameter count of a preset.
#[pyfunction]
fn param_count(preset: &str) -> PyResult<u64> {
    Ok(resolve_config(preset)?.count_params())
}

/// Per-sample multiply-accumulates of a preset at a square resolution.
#[pyfunction]
#[pyo3(signature = (preset, res = 224))]
fn flop_count(preset: &str, res: usize) -> PyResult<u64> {
    Ok(resolve_config(preset)?.count_flops(res, res).map_err(runtime_err)?.total)
}

/// Stage-by-stage feature map extents at a given input size.
#[pyfunction]
fn spatial_trace(preset: &str, height: usize, width: usize) -> PyResult<Vec<(usize, usize)>> {
    resolve_config(preset)?.spatial_trace(height, width).map_err(runtime_err)
}

/// The procedural four-class dataset as `(images, shape, labels)`.
#[pyfunction]
#[pyo3(signature = (per_class = 128, noise_std = 0.1, seed = 0))]
fn toy_dataset(
    per_class: usize,
    noise_std: f64,
    seed: u64,
) -> PyResult<(Vec<f32>, Vec<usize>, Vec<usize>)> {
    let data = generate::<f32>(&ToyDatasetSpec { per_class, noise_std, seed }).map_err(runtime_err)?;
    let shape = data.images.shape().to_vec();
    Ok((data.images.data().to_vec(), shape, data.labels))
}

/// Histogram and consistency statistics over an attention tensor whose
/// last axis holds one row of weights.
#[pyfunction]
fn attention_stats<'py>(
    py: Python<'py>,
    data: Vec<f64>,
    shape: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let attn = Tensor::new(&shape, data).map_err(runtime_err)?;
    let stats = analysis::attention_stats(&attn).map_err(runtime_err)?;
    let out = PyDict::new(py);
    out.set_item("bins", stats.bins)?;
    out.set_item("log10_lo", stats.log10_lo)?;
    out.set_item("log10_hi", stats.log10_hi)?;
    out.set_item("counts", stats.counts)?;
    out.set_item("density", stats.density)?;
    out.set_item("query_consistency", stats.query_consistency)?;
    out.set_item("head_consistency", stats.head_consistency)?;
    Ok(out)
}

/// Finite-difference gradient audit of every kernel, one representative
/// block, and the micro model; returns `(name, coords, max_rel_err)`
/// triples.
#[pyfunction]
#[pyo3(signature = (coords = 60))]
fn gradcheck_micro(coords: usize) -> PyResult<Vec<(String, usize, f64)>> {
    let checks = gradcheck::run_all(coords.max(50)).map_err(runtime_err)?;
    Ok(checks.into_iter().map(|c| (c.name, c.checked, c.max_rel_err)).collect())
}

/// An FCViT model with f32 weights.
#[pyclass(name = "Model")]
struct PyModel {
    inner: CoreModel<f32>,
}

#[pymethods]
impl PyModel {
    /// Seeded random initialization of a preset.
    #[new]
    #[pyo3(signature = (preset, seed = 0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let inner = CoreModel::init(resolve_config(preset)?, seed).map_err(runtime_err)?;
        Ok(PyModel { inner })
    }

    /// Reads weights saved by `save` into a fresh model of the preset.
    #[staticmethod]
    fn load(preset: &str, path: &str) -> PyResult<Self> {
        let inner = CoreModel::load(resolve_config(preset)?, path.as_ref()).map_err(runtime_err)?;
        Ok(PyModel { inner })
    }

    /// Writes all weights to a single deterministic file.
    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(runtime_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.config.name.clone()
    }

    fn param_count(&self) -> u64 {
        self.inner.param_count()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    /// The configuration as a JSON string.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Classification logits for a flat `[N, C, H, W]` batch; returns
    /// `(logits, shape)`.
    fn forward(&self, data: Vec<f32>, shape: Vec<usize>) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let x = tensor_from_parts(data, shape)?;
        let logits = self.inner.forward_logits(&x).map_err(runtime_err)?;
        let shape = logits.shape().to_vec();
        Ok((logits.data().to_vec(), shape))
    }

    /// One block's normalized similarity maps for a single image
    /// (`[C, H, W]` or `[1, C, H, W]`), as a dict with the flat maps,
    /// their shape, and the block coordinates.
    #[pyo3(signature = (data, shape, block, rep = None))]
    fn similarity_maps<'py>(
        &self,
        py: Python<'py>,
        data: Vec<f32>,
        shape: Vec<usize>,
        block: usize,
        rep: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let image = tensor_from_parts(data, shape)?;
        let export =
            analysis::export_similarity_maps(&self.inner, &image, block, rep).map_err(runtime_err)?;
        let out = PyDict::new(py);
        out.set_item("maps", export.maps.data().to_vec())?;
        out.set_item("shape", export.maps.shape().to_vec())?;
        out.set_item("stage", export.stage)?;
        out.set_item("block_in_stage", export.block_in_stage)?;
        out.set_item("rep", export.rep)?;
        out.set_item("group_consistency", export.group_consistency)?;
        Ok(out)
    }

    /// Trains in place on the procedural dataset and returns a dict with
    /// the per-step losses and the final whole-set accuracy.
    #[pyo3(signature = (steps = 500, lr = 1e-3, weight_decay = 0.05, batch_size = 64,
                        per_class = 128, noise_std = 0.1, data_seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train_toy<'py>(
        &mut self,
        py: Python<'py>,
        steps: usize,
        lr: f64,
        weight_decay: f64,
        batch_size: usize,
        per_class: usize,
        noise_std: f64,
        data_seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let data = generate::<f32>(&ToyDatasetSpec { per_class, noise_std, seed: data_seed })
            .map_err(runtime_err)?;
        let cfg = TrainConfig { steps, lr, weight_decay, batch_size };
        let records = train_toy(&mut self.inner, &data, &cfg, None).map_err(runtime_err)?;
        let accuracy = evaluate_accuracy(&self.inner, &data, batch_size).map_err(runtime_err)?;
        let out = PyDict::new(py);
        out.set_item("losses", records.iter().map(|r| r.loss).collect::<Vec<_>>())?;
        out.set_item(
            "batch_accuracies",
            records.iter().map(|r| r.batch_accuracy).collect::<Vec<_>>(),
        )?;
        out.set_item("final_train_accuracy", accuracy)?;
        out.set_item("samples", data.len())?;
        Ok(out)
    }
}

#[pymodule]
fn fcvit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(flop_count, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_trace, m)?)?;
    m.add_function(wrap_pyfunction!(toy_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(attention_stats, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_micro, m)?)?;
    Ok(())
}

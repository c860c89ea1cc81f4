//! Python module `mcl`: datasets, models, training and metrics.
//!
//! Images cross the boundary as flat lists of 2500 raw pixel values
//! (row-major, 0..=255) and shapes as lists of `(x, y)` tuples in
//! normalized patch coordinates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use mcl_core::data::{
    augment_dataset, load_dataset, normalize_pixels, save_dataset, synth_generate_with, AugmentParams, Split,
    SynthParams,
};
use mcl_core::eval::{ced_curve as core_ced, default_thresholds, evaluate, fps_bench};
use mcl_core::geometry::{clusters_for_pattern, LabelingPattern};
use mcl_core::json::overlay;
use mcl_core::loss::{group_weights as core_group_weights, ErrorProfile, ModelKind};
use mcl_core::network::{build_network, load_model, save_model, NetworkParams, ParamSegment, INPUT_SIZE};
use mcl_core::train::{run_full_pipeline, PipelineConfig};
use mcl_core::Tensor;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: mcl_core::Error) -> PyErr {
    match e {
        mcl_core::Error::Io(_) | mcl_core::Error::Stage { .. } | mcl_core::Error::Diverged { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn pattern(n: usize) -> PyResult<LabelingPattern> {
    LabelingPattern::from_count(n).map_err(err)
}

fn image_tensor(pixels: &[f32]) -> PyResult<Tensor<f32>> {
    Tensor::from_vec(&[INPUT_SIZE, INPUT_SIZE, 1], pixels.to_vec()).map_err(err)
}

#[pyclass(name = "Dataset", module = "mcl", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: mcl_core::data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (pattern_n, count, seed, split = "train"))]
    fn synth(pattern_n: usize, count: usize, seed: u64, split: &str) -> PyResult<Self> {
        let split: Split = split.parse().map_err(err)?;
        let inner =
            synth_generate_with(pattern(pattern_n)?, count, seed, &SynthParams::default(), split).map_err(err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: load_dataset(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_dataset(&self.inner, path).map_err(err)
    }

    /// Offline augmentation; keeps at most `max_outputs` variants per face.
    #[pyo3(signature = (seed, max_outputs = None))]
    fn augmented(&self, seed: u64, max_outputs: Option<usize>) -> PyResult<Self> {
        let params = AugmentParams {
            max_outputs,
            ..AugmentParams::default()
        };
        Ok(PyDataset {
            inner: augment_dataset(&self.inner, &params, seed).map_err(err)?,
        })
    }

    #[getter]
    fn pattern(&self) -> usize {
        self.inner.pattern.landmarks()
    }

    #[getter]
    fn split(&self) -> String {
        self.inner.split.to_string()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.samples.iter().map(|s| s.id.clone()).collect()
    }

    fn landmarks(&self, i: usize) -> PyResult<Vec<(f64, f64)>> {
        let s = self
            .inner
            .samples
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("no sample {i}")))?;
        Ok(s.shape.points().map(|[x, y]| (x, y)).collect())
    }

    /// Raw pixels of sample `i`, row-major.
    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        let s = self
            .inner
            .samples
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("no sample {i}")))?;
        Ok(s.image.data().to_vec())
    }
}

#[pyclass(name = "EvalReport", module = "mcl", get_all)]
pub struct PyEvalReport {
    mean_error: f64,
    failure_rate: f64,
    n_samples: usize,
    per_sample_mean_errors: Vec<f64>,
}

#[pymethods]
impl PyEvalReport {
    fn __repr__(&self) -> String {
        format!(
            "EvalReport(mean_error={:.2}, failure_rate={:.2}, n_samples={})",
            self.mean_error, self.failure_rate, self.n_samples
        )
    }
}

#[pyclass(name = "Model", module = "mcl", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: NetworkParams<f32>,
}

#[pymethods]
impl PyModel {
    /// A freshly initialized network for `pattern_n` landmarks.
    #[new]
    fn new(pattern_n: usize, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: build_network(pattern(pattern_n)?, seed).1,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_model(path).map_err(err)?.1,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.inner, path).map_err(err)
    }

    #[getter]
    fn pattern(&self) -> usize {
        self.inner.spec().pattern.landmarks()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn head_count(&self) -> usize {
        self.inner.heads().len()
    }

    /// Parameter count of `"feature_head"` (last convolution plus its
    /// batch norm and the head) or `"all"`.
    fn count_params(&self, segment: &str) -> PyResult<usize> {
        let seg = match segment {
            "feature_head" => ParamSegment::FeatureHead,
            "all" => ParamSegment::All,
            other => return Err(PyValueError::new_err(format!("unknown segment `{other}`"))),
        };
        Ok(self.inner.count_params(seg))
    }

    /// Landmarks of one raw 50x50 image.
    #[pyo3(signature = (pixels, head = 0))]
    fn predict(&self, pixels: Vec<f32>, head: usize) -> PyResult<Vec<(f64, f64)>> {
        let x = normalize_pixels(&image_tensor(&pixels)?);
        let f = self.inner.extract_features(&x).map_err(err)?;
        let shape = self.inner.predict_shape(head, &f).map_err(err)?;
        Ok(shape.points().map(|[x, y]| (x, y)).collect())
    }

    #[pyo3(signature = (dataset, head = 0))]
    fn evaluate(&self, dataset: &PyDataset, head: usize) -> PyResult<PyEvalReport> {
        let r = evaluate(&self.inner, head, &dataset.inner).map_err(err)?;
        Ok(PyEvalReport {
            mean_error: r.mean_error,
            failure_rate: r.failure_rate,
            n_samples: r.n_samples,
            per_sample_mean_errors: r.per_sample_mean_errors,
        })
    }

    /// Single-image inferences per second on one raw image.
    #[pyo3(signature = (pixels, repeats = 100))]
    fn fps(&self, pixels: Vec<f32>, repeats: usize) -> PyResult<f64> {
        let x = normalize_pixels(&image_tensor(&pixels)?);
        fps_bench(&self.inner, 0, &[x], repeats).map_err(err)
    }
}

#[pyclass(name = "TrainResult", module = "mcl", get_all)]
pub struct PyTrainResult {
    bm: PyModel,
    wm: PyModel,
    am: PyModel,
    heads: Vec<PyModel>,
    /// `(model, dataset, mean_error, failure_rate)` rows.
    report: Vec<(String, String, f64, f64)>,
}

/// Runs the whole pipeline with the desk-scale schedule, or with a JSON
/// object of `pretrain`/`weighting`/`multicenter`/`alpha` overrides.
#[pyfunction]
#[pyo3(signature = (train, val, seed, config_json = None))]
fn train_pipeline(
    py: Python<'_>,
    train: &PyDataset,
    val: &PyDataset,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<PyTrainResult> {
    let cfg = match config_json {
        Some(text) => overlay(&PipelineConfig::desk(), text).map_err(err)?,
        None => PipelineConfig::desk(),
    };
    let (train, val) = (&train.inner, &val.inner);
    let (models, rows) = py.detach(|| run_full_pipeline(train, val, &cfg, seed)).map_err(err)?;
    let heads = (0..models.heads.len())
        .map(|i| models.head_model(i).map(|inner| PyModel { inner }))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    Ok(PyTrainResult {
        bm: PyModel { inner: models.bm },
        wm: PyModel { inner: models.wm },
        am: PyModel { inner: models.am },
        heads,
        report: rows
            .into_iter()
            .map(|r| (r.model, r.dataset, r.mean_error, r.failure_rate))
            .collect(),
    })
}

/// `u_j = n eps_j / sum(eps)`.
#[pyfunction]
fn weights_from_errors(errors: Vec<f64>) -> PyResult<Vec<f64>> {
    let profile = ErrorProfile {
        errors,
        source: ModelKind::Basic,
    };
    Ok(mcl_core::loss::weights_from_errors(&profile).map_err(err)?.u)
}

/// `(u_P, u_Q)` for a cluster of `p` out of `n` landmarks.
#[pyfunction]
fn group_weights(n: usize, p: usize, alpha: f64) -> PyResult<(f64, f64)> {
    if !(alpha > 1.0) || p == 0 || p >= n {
        return Err(PyValueError::new_err("need alpha > 1 and 0 < p < n"));
    }
    Ok(core_group_weights(n, p, alpha))
}

/// Weights emphasizing cluster `i` of the pattern implied by `errors`.
#[pyfunction]
#[pyo3(signature = (i, errors, alpha = mcl_core::loss::DEFAULT_ALPHA))]
fn multicenter_weights(i: usize, errors: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let pat = pattern(errors.len())?;
    let profile = ErrorProfile {
        errors,
        source: ModelKind::Weighting,
    };
    Ok(
        mcl_core::loss::multicenter_weights(i, &profile, &clusters_for_pattern(pat), alpha)
            .map_err(err)?
            .u,
    )
}

/// `(name, landmark indices)` for each cluster of a pattern.
#[pyfunction]
fn clusters(pattern_n: usize) -> PyResult<Vec<(String, Vec<usize>)>> {
    let p = clusters_for_pattern(pattern(pattern_n)?);
    Ok(p.names().iter().cloned().zip(p.clusters().iter().cloned()).collect())
}

/// Fraction of errors `<= t` per threshold; defaults to 0..=0.2 in 0.002
/// steps.
#[pyfunction]
#[pyo3(signature = (errors, thresholds = None))]
fn ced_curve(errors: Vec<f64>, thresholds: Option<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let c = core_ced(&errors, &thresholds.unwrap_or_else(default_thresholds)).map_err(err)?;
    Ok((c.thresholds, c.fractions))
}

#[pymodule]
fn mcl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEvalReport>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(train_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(weights_from_errors, m)?)?;
    m.add_function(wrap_pyfunction!(group_weights, m)?)?;
    m.add_function(wrap_pyfunction!(multicenter_weights, m)?)?;
    m.add_function(wrap_pyfunction!(clusters, m)?)?;
    m.add_function(wrap_pyfunction!(ced_curve, m)?)?;
    Ok(())
}

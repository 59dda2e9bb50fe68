//! Python module `pydagan`: images and fields as nested lists, phantoms,
//! misalignment, warping, metrics, model construction, training and inference.

use std::path::PathBuf;

use dagan::{
    checkpoint::load_model,
    config::ExperimentConfig,
    deform_sim::{apply_misalignment, level_spec, simulate_dataset},
    imaging::{load_dataset, IntensityScale, Mask},
    metrics::{self, MetricsConfig},
    networks::{DaGanModel, ModelConfig},
    phantom::{generate_phantom_dataset, phantom_pair, PhantomSpec},
    training::{synthesize, train as train_run, Direction},
    warp::warp_image,
    DeformationField2D, Error, Image2D, PairedSample,
};
use pyo3::{
    exceptions::{PyRuntimeError, PyValueError},
    prelude::*,
    types::PyDict,
};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Argument(_) | Error::Shape(_) | Error::Config(_) | Error::Validation { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows_of(height: usize, width: usize, values: &[f32]) -> Vec<Vec<f32>> {
    (0..height)
        .map(|r| values[r * width..(r + 1) * width].to_vec())
        .collect()
}

fn flatten(rows: Vec<Vec<f32>>) -> PyResult<(usize, usize, Vec<f32>)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok((h, w, rows.into_iter().flatten().collect()))
}

/// Single-channel image in normalized units.
#[pyclass(name = "Image", module = "pydagan", from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: Image2D,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(rows: Vec<Vec<f32>>) -> PyResult<Self> {
        let (h, w, values) = flatten(rows)?;
        Ok(Self {
            inner: Image2D::new(h, w, values).map_err(to_py)?,
        })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.dims()
    }

    fn to_list(&self) -> Vec<Vec<f32>> {
        let (h, w) = self.inner.dims();
        rows_of(h, w, self.inner.values())
    }

    fn min_max(&self) -> (f32, f32) {
        self.inner.min_max()
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.dims();
        format!("Image({h}x{w})")
    }
}

/// Dense displacement field; `dy`, `dx` in pixels.
#[pyclass(name = "DeformationField", module = "pydagan", from_py_object)]
#[derive(Clone)]
struct PyField {
    inner: DeformationField2D,
}

#[pymethods]
impl PyField {
    #[new]
    fn new(dy: Vec<Vec<f32>>, dx: Vec<Vec<f32>>) -> PyResult<Self> {
        let (h, w, dy) = flatten(dy)?;
        let (h2, w2, dx) = flatten(dx)?;
        if (h, w) != (h2, w2) {
            return Err(PyValueError::new_err("dy and dx must have the same shape"));
        }
        Ok(Self {
            inner: DeformationField2D::new(h, w, dy, dx).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn constant(height: usize, width: usize, dy: f32, dx: f32) -> Self {
        Self {
            inner: DeformationField2D::constant(height, width, dy, dx),
        }
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.dims()
    }

    fn components(&self) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let (h, w) = self.inner.dims();
        (rows_of(h, w, self.inner.dy()), rows_of(h, w, self.inner.dx()))
    }

    fn max_magnitude(&self) -> f32 {
        self.inner.max_magnitude()
    }
}

/// Generators, aligners and discriminators.
#[pyclass(name = "Model", module = "pydagan", unsendable)]
struct PyModel {
    inner: DaGanModel,
}

#[pymethods]
impl PyModel {
    /// `size` is `"toy"` or `"full"`; `seed` fixes the initialization.
    #[new]
    #[pyo3(signature = (size = "toy", seed = 0, aligners = true))]
    fn new(size: &str, seed: i64, aligners: bool) -> PyResult<Self> {
        let mut config = match size {
            "toy" => ModelConfig::toy(),
            "full" => ModelConfig::full(),
            _ => return Err(PyValueError::new_err(format!("unknown size `{size}` (toy, full)"))),
        };
        config.aligners = aligners;
        tch::manual_seed(seed);
        Ok(Self {
            inner: DaGanModel::new(&config, tch::Device::Cpu).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_model(&checkpoint, tch::Device::Cpu).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn parameter_count(&self) -> i64 {
        self.inner.count_parameters()
    }

    fn parameter_counts(&self) -> std::collections::BTreeMap<String, i64> {
        self.inner.parameter_counts()
    }

    /// Translates one image; `direction` is `"x2y"` (G) or `"y2x"` (F).
    #[pyo3(signature = (image, direction = "x2y"))]
    fn synthesize(&self, image: &PyImage, direction: &str) -> PyResult<PyImage> {
        let dir: Direction = direction.parse().map_err(to_py)?;
        let pair = PairedSample::new("input", image.inner.clone(), image.inner.clone(), None).map_err(to_py)?;
        let mut out = synthesize(&self.inner, &[pair], dir).map_err(to_py)?;
        Ok(PyImage { inner: out.remove(0) })
    }
}

#[pyfunction]
fn warp(image: &PyImage, field: &PyField) -> PyResult<PyImage> {
    Ok(PyImage {
        inner: warp_image(&image.inner, &field.inner).map_err(to_py)?,
    })
}

/// Aligned phantom pair `(A, B)` number `index`.
#[pyfunction]
#[pyo3(signature = (index, size = 64, seed = 0))]
fn phantom(index: usize, size: usize, seed: u64) -> PyResult<(PyImage, PyImage)> {
    let spec = PhantomSpec {
        image_size: size,
        seed,
        ..PhantomSpec::default()
    };
    let (a, b) = phantom_pair(&spec, index).map_err(to_py)?;
    Ok((PyImage { inner: a }, PyImage { inner: b }))
}

/// Misaligns `target` at level NA-`level`; returns `(moved, field)`.
#[pyfunction]
#[pyo3(signature = (source, target, level, seed = 0))]
fn misalign(source: &PyImage, target: &PyImage, level: usize, seed: u64) -> PyResult<(PyImage, PyField)> {
    let spec = level_spec(level).map_err(to_py)?.with_seed(seed);
    let pair = PairedSample::new("pair", source.inner.clone(), target.inner.clone(), None).map_err(to_py)?;
    let (moved, field) = apply_misalignment(&pair, &spec, &mut spec.rng()).map_err(to_py)?;
    Ok((PyImage { inner: moved.target }, PyField { inner: field }))
}

/// Foreground-masked `{nmae, psnr, ssim}` of `pred` against `reference`.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, pred: &PyImage, reference: &PyImage) -> PyResult<Bound<'py, PyDict>> {
    let m = metrics::evaluate_pair("pair", &pred.inner, &reference.inner, &MetricsConfig::default()).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("nmae", m.nmae)?;
    d.set_item("psnr", m.psnr)?;
    d.set_item("ssim", m.ssim)?;
    d.set_item("foreground_pixels", m.foreground_pixels)?;
    Ok(d)
}

/// Unmasked PSNR in dB over `data_range`.
#[pyfunction]
#[pyo3(signature = (pred, reference, data_range = 2.0))]
fn psnr(pred: &PyImage, reference: &PyImage, data_range: f64) -> PyResult<f64> {
    let (h, w) = reference.inner.dims();
    metrics::psnr(&pred.inner, &reference.inner, &Mask::full(h, w), data_range).map_err(to_py)
}

/// Unmasked SSIM with an 11x11 Gaussian window.
#[pyfunction]
fn ssim(pred: &PyImage, reference: &PyImage) -> PyResult<f64> {
    let (h, w) = reference.inner.dims();
    metrics::ssim(&pred.inner, &reference.inner, &Mask::full(h, w)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (out_dir, n_samples = 200, size = 64, seed = 0))]
fn generate_phantoms(out_dir: PathBuf, n_samples: usize, size: usize, seed: u64) -> PyResult<usize> {
    let spec = PhantomSpec {
        image_size: size,
        n_samples,
        seed,
        ..PhantomSpec::default()
    };
    Ok(generate_phantom_dataset(&spec, &out_dir).map_err(to_py)?.len())
}

#[pyfunction]
#[pyo3(signature = (manifest, level, out_dir, seed = 0))]
fn simulate(manifest: PathBuf, level: usize, out_dir: PathBuf, seed: u64) -> PyResult<usize> {
    let input = load_dataset(&manifest).map_err(to_py)?;
    let spec = level_spec(level).map_err(to_py)?.with_seed(seed);
    Ok(simulate_dataset(&input, &spec, &out_dir).map_err(to_py)?.len())
}

/// Resolves a TOML configuration with `section.key=value` overrides and
/// returns the fully materialized document.
#[pyfunction]
#[pyo3(signature = (document = "", overrides = Vec::new()))]
fn resolve_config(document: &str, overrides: Vec<String>) -> PyResult<String> {
    ExperimentConfig::resolve(document, &overrides)
        .and_then(|c| c.to_toml())
        .map_err(to_py)
}

/// Trains from a configuration document; returns the run summary as JSON.
#[pyfunction]
#[pyo3(signature = (manifest, run_dir, document = "", overrides = Vec::new()))]
fn train(
    py: Python<'_>,
    manifest: PathBuf,
    run_dir: PathBuf,
    document: &str,
    overrides: Vec<String>,
) -> PyResult<String> {
    let config = ExperimentConfig::resolve(document, &overrides).map_err(to_py)?;
    let data = load_dataset(&manifest).map_err(to_py)?;
    let summary = py
        .detach(|| train_run(&config, &data, None, &run_dir, None))
        .map_err(to_py)?;
    serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Physical `(lo, hi)` window mapped onto [-1, 1] by default.
#[pyfunction]
fn unit_scale() -> (f64, f64) {
    let s = IntensityScale::UNIT;
    (s.lo, s.hi)
}

#[pymodule]
fn pydagan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(misalign, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantoms, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(unit_scale, m)?)?;
    Ok(())
}

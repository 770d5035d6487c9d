//! Python bindings. Configs cross the boundary as JSON strings with the same
//! nested layout the Rust structs serialize to; omitted fields keep defaults.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use scaffold_rf::data::{build_dataset, Dataset, DatasetConfig};
use scaffold_rf::inference::{self, FitMode, FitResult, InferenceConfig, InvertInputs, Variant};
use scaffold_rf::render::{render_image, RenderConfig, Scaffold};
use scaffold_rf::train::{train_glo, TrainConfig};
use scaffold_rf::{metrics, voxel, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Shape(_) | Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}"))),
    }
}

#[pyclass(name = "Camera", module = "scaffold_rf_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCamera(scaffold_rf::Camera);

#[pymethods]
impl PyCamera {
    /// Pinhole camera at `eye` looking at `target` (y up).
    #[staticmethod]
    #[pyo3(signature = (eye, target, fov_deg, width, height))]
    fn look_at(eye: [f64; 3], target: [f64; 3], fov_deg: f64, width: usize, height: usize) -> Self {
        let v = |a: [f64; 3]| scaffold_rf::Vec3::new(a[0], a[1], a[2]);
        Self(scaffold_rf::Camera::look_at(v(eye), v(target), fov_deg, width, height))
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        serde_json::from_str(s).map(Self).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("camera serializes")
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    fn center(&self) -> [f64; 3] {
        self.0.center().to_array()
    }

    /// `(origin, direction)` of the ray through pixel coordinates `(px, py)`.
    fn ray(&self, px: f64, py: f64) -> ([f64; 3], [f64; 3]) {
        let r = scaffold_rf::math::camera_ray(&self.0, px, py);
        (r.origin.to_array(), r.direction.to_array())
    }

    fn mirrored(&self) -> Self {
        Self(self.0.mirrored())
    }
}

#[pyclass(name = "Image", module = "scaffold_rf_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyImage(scaffold_rf::Image);

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        scaffold_rf::Image::new(width, height, channels, data).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let img = match path.extension().and_then(|e| e.to_str()) {
            Some("srft") => scaffold_rf::Image::load_srft(&path),
            _ => scaffold_rf::Image::load_png(&path),
        };
        img.map(Self).map_err(to_py)
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_png(&path).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels
    }

    /// Row-major, channel-interleaved values in [0, 1].
    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data.clone()
    }
}

#[pyclass(name = "VoxelGrid", module = "scaffold_rf_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyVoxelGrid(scaffold_rf::VoxelGrid);

#[pymethods]
impl PyVoxelGrid {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        scaffold_rf::VoxelGrid::load(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.dims
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values.clone()
    }

    fn sample(&self, p: [f64; 3]) -> f64 {
        self.0.trilinear_sample(scaffold_rf::Vec3::new(p[0], p[1], p[2]))
    }

    fn mirror(&self) -> Self {
        Self(self.0.mirror())
    }

    #[pyo3(signature = (other, threshold = 0.5))]
    fn iou(&self, other: &PyVoxelGrid, threshold: f64) -> PyResult<f64> {
        voxel::voxel_iou(&self.0, &other.0, threshold).map_err(to_py)
    }
}

#[pyclass(name = "Model", module = "scaffold_rf_py")]
pub struct PyModel(scaffold_rf::Model);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        scaffold_rf::Model::load(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    #[getter]
    fn conditional(&self) -> bool {
        self.0.conditional
    }

    fn object_ids(&self) -> Vec<String> {
        self.0.object_ids().cloned().collect()
    }

    /// Voxel scaffold decoded from the trained shape code of `object_id`.
    fn decode(&self, object_id: &str) -> PyResult<PyVoxelGrid> {
        let theta = self
            .0
            .theta
            .get(object_id)
            .ok_or_else(|| PyValueError::new_err(format!("no codes for {object_id}")))?;
        Ok(PyVoxelGrid(self.0.shape.decode(theta)))
    }

    /// Renders a trained object with its own codes.
    #[pyo3(signature = (object_id, camera, render_config = None))]
    fn render(&self, py: Python<'_>, object_id: &str, camera: &PyCamera, render_config: Option<&str>) -> PyResult<PyImage> {
        let cfg: RenderConfig = parse(render_config)?;
        let phi = self
            .0
            .phi
            .get(object_id)
            .ok_or_else(|| PyValueError::new_err(format!("no codes for {object_id}")))?;
        let grid = (!self.0.conditional).then(|| self.0.shape.decode(&self.0.theta[object_id]));
        let cam = camera.0;
        let img = py.detach(|| {
            let sc = grid.as_ref().map_or(Scaffold::Absent, Scaffold::Grid);
            render_image(&self.0.appearance, sc, phi, &cam, &cfg)
        });
        Ok(PyImage(img))
    }
}

#[pyclass(name = "Fit", module = "scaffold_rf_py")]
pub struct PyFit(FitResult);

#[pymethods]
impl PyFit {
    #[staticmethod]
    fn load(dir: PathBuf, stem: &str) -> PyResult<Self> {
        FitResult::load(&dir, stem).map(Self).map_err(to_py)
    }

    fn save(&self, dir: PathBuf, stem: &str) -> PyResult<()> {
        self.0.save(&dir, stem).map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.0.variant.name()
    }

    #[getter]
    fn residual(&self) -> f64 {
        self.0.residual
    }

    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.0.history.iter().map(|r| r.loss).collect()
    }

    fn scaffold(&self) -> Option<PyVoxelGrid> {
        self.0.scaffold.clone().map(PyVoxelGrid)
    }

    #[pyo3(signature = (camera, render_config = None))]
    fn render(&self, py: Python<'_>, camera: &PyCamera, render_config: Option<&str>) -> PyResult<PyImage> {
        let cfg: RenderConfig = parse(render_config)?;
        let cam = camera.0;
        Ok(PyImage(py.detach(|| inference::render_novel_view(&self.0, &cam, &cfg))))
    }
}

/// Generates the procedural dataset and writes it to `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None))]
fn generate_dataset(py: Python<'_>, out_dir: PathBuf, config: Option<&str>) -> PyResult<Vec<String>> {
    let cfg: DatasetConfig = parse(config)?;
    let ds = py.detach(|| build_dataset(&cfg)).map_err(to_py)?;
    ds.save(&out_dir).map_err(to_py)?;
    Ok(ds.scenes.iter().map(|s| s.scene.id.clone()).collect())
}

/// Trains on every object of the dataset at `data_dir`.
#[pyfunction]
#[pyo3(signature = (data_dir, config = None))]
fn train(py: Python<'_>, data_dir: PathBuf, config: Option<&str>) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg: TrainConfig = parse(config)?;
    let ds = Dataset::load(&data_dir).map_err(to_py)?;
    let out = py
        .detach(|| train_glo(&ds, Default::default(), Default::default(), &cfg))
        .map_err(to_py)?;
    let losses = out.history.iter().map(|r| r.loss).collect();
    Ok((PyModel(out.model), losses))
}

/// Fits one image. `variant` is v1..v4 or a variant name; `mode` is
/// code-only or code-plus-network.
#[pyfunction]
#[pyo3(signature = (model, image, camera, variant = "v2", mode = "code-only", symmetry = true, mask = None, gt_voxels = None, config = None))]
#[allow(clippy::too_many_arguments)]
fn invert(
    py: Python<'_>,
    model: &PyModel,
    image: &PyImage,
    camera: &PyCamera,
    variant: &str,
    mode: &str,
    symmetry: bool,
    mask: Option<&PyImage>,
    gt_voxels: Option<&PyVoxelGrid>,
    config: Option<&str>,
) -> PyResult<PyFit> {
    let variant: Variant = variant.parse().map_err(to_py)?;
    let mode: FitMode = mode.parse().map_err(to_py)?;
    let cfg: InferenceConfig = parse(config)?;
    let inputs = InvertInputs {
        mask: mask.map(|m| &m.0),
        gt_voxels: gt_voxels.map(|g| &g.0),
    };
    let cam = camera.0;
    py.detach(|| inference::invert(&model.0, &image.0, &cam, variant, mode, symmetry, &inputs, &cfg))
        .map(PyFit)
        .map_err(to_py)
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::psnr(&a.0, &b.0).map_err(to_py)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::ssim(&a.0, &b.0).map_err(to_py)
}

/// Runs the invariant suite; returns `(name, passed, detail)` per check.
#[pyfunction]
#[pyo3(signature = (cases = 1000, seed = 0))]
fn selftest(py: Python<'_>, cases: usize, seed: u64) -> Vec<(String, bool, String)> {
    py.detach(|| scaffold_rf::selftest::run(cases, seed))
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pymodule]
fn scaffold_rf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCamera>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyVoxelGrid>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyFit>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(invert, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}

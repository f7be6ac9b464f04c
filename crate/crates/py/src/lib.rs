//! Python bindings. Point arrays cross the boundary as sequences of
//! `(x, y, z)` and descriptor matrices as lists of rows.

use genreg_core::bench::{self, BenchConfig};
use genreg_core::features::{self, FeatureData, FeatureField, ViewFeatureStack};
use genreg_core::fusion;
use genreg_core::geometry::{self, CameraModel, DepthMap, PointCloud};
use genreg_core::pipeline::{self, BranchInputs, GeoBranch, ImageBranch, PipelineConfig};
use genreg_core::pose;
use genreg_core::Error;
use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::RegistrationFailed(_) | Error::TooFewCorrespondences(_) | Error::DegenerateConfiguration => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cloud(points: Vec<[f64; 3]>) -> PyResult<PointCloud> {
    PointCloud::new(points.into_iter().map(Into::into).collect()).map_err(to_py)
}

fn points_out(c: &PointCloud) -> Vec<[f64; 3]> {
    c.points().iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix_out(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn field(rows: Vec<Vec<f32>>) -> PyResult<FeatureField> {
    FeatureField::from_rows(&rows).map_err(to_py)
}

/// `views` is a list of `k * k` row lists, one per view.
fn stack(views: Vec<Vec<Vec<f32>>>, k: usize) -> PyResult<ViewFeatureStack> {
    let fields: Vec<FeatureField> = views.into_iter().map(field).collect::<PyResult<_>>()?;
    ViewFeatureStack::from_views(k, &fields).map_err(to_py)
}

fn stack_out(s: &ViewFeatureStack) -> Vec<Vec<Vec<f32>>> {
    (0..s.views())
        .map(|v| s.view(v).outer_iter().map(|r| r.to_vec()).collect())
        .collect()
}

/// Rigid transform `x -> R x + t`.
#[pyclass(name = "RigidTransform", module = "genreg", from_py_object)]
#[derive(Clone)]
struct PyRigidTransform {
    inner: geometry::RigidTransform,
}

#[pymethods]
impl PyRigidTransform {
    /// `rotation` is 9 values in row-major order.
    #[new]
    #[pyo3(signature = (rotation=None, translation=None))]
    fn new(rotation: Option<[f64; 9]>, translation: Option<[f64; 3]>) -> PyResult<Self> {
        let id = geometry::RigidTransform::identity();
        let r = rotation.unwrap_or(id.rotation_row_major());
        let t = translation.unwrap_or([0.0; 3]);
        Ok(Self {
            inner: geometry::RigidTransform::from_row_major(&r, &t).map_err(to_py)?,
        })
    }

    /// Rotation by `angle` radians about `axis`, then translation.
    #[staticmethod]
    #[pyo3(signature = (axis, angle, translation=[0.0; 3]))]
    fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Self {
        Self {
            inner: geometry::RigidTransform::from_axis_angle(axis.into(), angle, translation.into()),
        }
    }

    #[getter]
    fn rotation(&self) -> [f64; 9] {
        self.inner.rotation_row_major()
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        let t = self.inner.translation;
        [t.x, t.y, t.z]
    }

    fn apply(&self, points: Vec<[f64; 3]>) -> PyResult<Vec<[f64; 3]>> {
        Ok(points_out(&self.inner.apply(&cloud(points)?)))
    }

    fn inverse(&self) -> Self {
        Self {
            inner: self.inner.inverse(),
        }
    }

    /// `self ∘ other`: `other` is applied first.
    fn compose(&self, other: &Self) -> Self {
        Self {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn __repr__(&self) -> String {
        format!("RigidTransform(rotation={:?}, translation={:?})", self.rotation(), self.translation())
    }
}

#[pyfunction]
fn noisy_and(p_img: f64, p_geo: f64, prior: f64) -> f64 {
    fusion::noisy_and(p_img, p_geo, prior)
}

#[pyfunction]
fn noisy_or(p_img: f64, p_geo: f64) -> f64 {
    fusion::noisy_or(p_img, p_geo)
}

/// Elementwise noisy-AND of two posterior matrices under a scalar prior.
#[pyfunction]
fn fuse_noisy_and(p_img: Vec<Vec<f64>>, p_geo: Vec<Vec<f64>>, prior: f64) -> PyResult<Vec<Vec<f64>>> {
    let out = fusion::fuse_noisy_and(&matrix(p_img)?, &matrix(p_geo)?, &fusion::MatchPrior::Scalar(prior))
        .map_err(to_py)?;
    Ok(matrix_out(&out))
}

#[pyfunction]
fn fuse_noisy_or(p_img: Vec<Vec<f64>>, p_geo: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(matrix_out(&fusion::fuse_noisy_or(&matrix(p_img)?, &matrix(p_geo)?).map_err(to_py)?))
}

/// Row-softmax of cosine similarities between two descriptor sets.
#[pyfunction]
#[pyo3(signature = (src, tgt, tau=0.1))]
fn geo_posterior(src: Vec<Vec<f32>>, tgt: Vec<Vec<f32>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let (s, t) = (field(src)?, field(tgt)?);
    let p = pipeline::geo_posterior(&GeoBranch { src: &s, tgt: &t }, tau).map_err(to_py)?;
    Ok(matrix_out(p.values()))
}

/// Mutual nearest neighbors of a score matrix as `(src, tgt, score)`.
#[pyfunction]
fn mutual_nn_match(scores: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize, f64)>> {
    Ok(pose::mutual_nn_match(&matrix(scores)?)
        .pairs
        .iter()
        .map(|c| (c.src, c.tgt, c.confidence))
        .collect())
}

/// Least-squares rigid fit of paired points.
#[pyfunction]
fn horn_fit(src: Vec<[f64; 3]>, tgt: Vec<[f64; 3]>) -> PyResult<PyRigidTransform> {
    let (p, q) = (cloud(src)?, cloud(tgt)?);
    Ok(PyRigidTransform {
        inner: pose::horn_fit_points(p.points(), q.points()).map_err(to_py)?,
    })
}

#[pyfunction]
fn rre(estimate: &PyRigidTransform, truth: &PyRigidTransform) -> f64 {
    pose::rre(&estimate.inner.rotation, &truth.inner.rotation)
}

#[pyfunction]
fn rte(estimate: &PyRigidTransform, truth: &PyRigidTransform) -> f64 {
    pose::rte(&estimate.inner.translation, &truth.inner.translation)
}

#[pyfunction]
fn voxel_downsample(points: Vec<[f64; 3]>, voxel: f64) -> PyResult<Vec<[f64; 3]>> {
    Ok(points_out(&geometry::voxel_downsample(&cloud(points)?, voxel).map_err(to_py)?))
}

/// Back-projects a row-major depth image. `camera` is the JSON sidecar text.
#[pyfunction]
fn lift(depth: Vec<f64>, camera: &str) -> PyResult<Vec<[f64; 3]>> {
    let cam: CameraModel = serde_json::from_str(camera).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let d = DepthMap::new(cam.width(), cam.height(), depth).map_err(to_py)?;
    Ok(points_out(&cam.lift(&d).map_err(to_py)?.0))
}

/// Renders points into a row-major depth (pinhole) or range (f-theta) image.
#[pyfunction]
fn project(points: Vec<[f64; 3]>, camera: &str) -> PyResult<Vec<f64>> {
    let cam: CameraModel = serde_json::from_str(camera).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(cam.render(&cloud(points)?).map_err(to_py)?.depth.values().to_vec())
}

/// Default pipeline configuration as JSON text.
#[pyfunction]
fn default_config() -> String {
    serde_json::to_string_pretty(&PipelineConfig::default()).unwrap()
}

/// Full pipeline. Image features are `k * k` views of row lists.
/// Returns a dict with `transform`, `n_matches` and `inliers`.
#[pyfunction]
#[pyo3(signature = (src, tgt, src_geo=None, tgt_geo=None, src_img=None, tgt_img=None, k=None, config=None))]
#[allow(clippy::too_many_arguments)]
fn register<'py>(
    py: Python<'py>,
    src: Vec<[f64; 3]>,
    tgt: Vec<[f64; 3]>,
    src_geo: Option<Vec<Vec<f32>>>,
    tgt_geo: Option<Vec<Vec<f32>>>,
    src_img: Option<Vec<Vec<Vec<f32>>>>,
    tgt_img: Option<Vec<Vec<Vec<f32>>>>,
    k: Option<usize>,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = match config {
        Some(text) => PipelineConfig::from_json(text).map_err(to_py)?,
        None => PipelineConfig::default(),
    };
    let (p, q) = (cloud(src)?, cloud(tgt)?);
    let geo = match (src_geo, tgt_geo) {
        (Some(a), Some(b)) => Some((field(a)?, field(b)?)),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("pass both src_geo and tgt_geo")),
    };
    let img = match (src_img, tgt_img) {
        (Some(a), Some(b)) => {
            let k = k.unwrap_or_else(|| (a.len() as f64).sqrt().round() as usize);
            Some((stack(a, k)?, stack(b, k)?))
        }
        (None, None) => None,
        _ => return Err(PyValueError::new_err("pass both src_img and tgt_img")),
    };
    let inputs = BranchInputs {
        img: img.as_ref().map(|(s, t)| ImageBranch {
            src: s,
            tgt: t,
            src_coverage: None,
        }),
        geo: geo.as_ref().map(|(s, t)| GeoBranch { src: s, tgt: t }),
    };
    let out = py
        .detach(|| pipeline::register(&cfg, &p, &q, &inputs))
        .map_err(to_py)?;
    let n_matches = out.matches.len();
    let r = out.registration.map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("transform", PyRigidTransform { inner: r.transform })?;
    d.set_item("n_matches", n_matches)?;
    d.set_item("inliers", r.inlier_indices)?;
    d.set_item("fusion_mode", cfg.fusion.as_str())?;
    Ok(d)
}

/// Reads an interchange feature file. Returns `(branch, k, data)` where
/// `data` is a row list for geometric features and a list of views for
/// image features.
#[pyfunction]
fn read_features<'py>(py: Python<'py>, path: &str) -> PyResult<(String, Option<usize>, Bound<'py, PyAny>)> {
    let (data, _) = features::read_features(path).map_err(to_py)?;
    Ok(match data {
        FeatureData::Geo(f) => {
            let rows: Vec<Vec<f32>> = f.descriptors().outer_iter().map(|r| r.to_vec()).collect();
            ("geo".into(), None, rows.into_pyobject(py)?.into_any())
        }
        FeatureData::Img(s) => ("img".into(), Some(s.k()), stack_out(&s).into_pyobject(py)?.into_any()),
    })
}

#[pyfunction]
#[pyo3(signature = (path, rows, source_model="unknown"))]
fn write_geo_features(path: &str, rows: Vec<Vec<f32>>, source_model: &str) -> PyResult<()> {
    features::write_features(path, &FeatureData::Geo(field(rows)?), source_model).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (path, views, k, source_model="unknown"))]
fn write_img_features(path: &str, views: Vec<Vec<Vec<f32>>>, k: usize, source_model: &str) -> PyResult<()> {
    features::write_features(path, &FeatureData::Img(stack(views, k)?), source_model).map_err(to_py)
}

/// Runs the synthetic benchmark; `config` is JSON text (defaults when
/// omitted). Writes reports to `out_dir` if given and returns the summary
/// as JSON text.
#[pyfunction]
#[pyo3(signature = (config=None, out_dir=None))]
fn run_benchmark(py: Python<'_>, config: Option<&str>, out_dir: Option<&str>) -> PyResult<String> {
    let cfg = match config {
        Some(text) => BenchConfig::from_json(text).map_err(to_py)?,
        None => BenchConfig::default(),
    };
    let report = py.detach(|| bench::run_benchmark(&cfg)).map_err(to_py)?;
    if let Some(dir) = out_dir {
        bench::write_report(&report, dir).map_err(to_py)?;
    }
    Ok(serde_json::to_string_pretty(&report.summary).unwrap())
}

/// Synthetic scene: `(src, tgt, transform, gt_pairs)`.
#[pyfunction]
#[pyo3(signature = (n_points=1000, overlap=0.5, rotation_deg=30.0, translation_m=1.0, noise_sigma=0.005, seed=0))]
#[allow(clippy::type_complexity)]
fn gen_scene(
    n_points: usize,
    overlap: f64,
    rotation_deg: f64,
    translation_m: f64,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<(Vec<[f64; 3]>, Vec<[f64; 3]>, PyRigidTransform, Vec<(usize, usize)>)> {
    let s = bench::gen_scene(&bench::SceneSpec {
        n_points,
        overlap,
        rotation_deg,
        translation_m,
        noise_sigma,
        seed,
        ..bench::SceneSpec::default()
    })
    .map_err(to_py)?;
    Ok((points_out(&s.src), points_out(&s.tgt), PyRigidTransform { inner: s.gt }, s.gt_pairs))
}

#[pymodule]
fn genreg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    init(m)
}

/// Registers every class and function on `m`.
pub fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRigidTransform>()?;
    m.add_function(wrap_pyfunction!(noisy_and, m)?)?;
    m.add_function(wrap_pyfunction!(noisy_or, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_noisy_and, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_noisy_or, m)?)?;
    m.add_function(wrap_pyfunction!(geo_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_nn_match, m)?)?;
    m.add_function(wrap_pyfunction!(horn_fit, m)?)?;
    m.add_function(wrap_pyfunction!(rre, m)?)?;
    m.add_function(wrap_pyfunction!(rte, m)?)?;
    m.add_function(wrap_pyfunction!(voxel_downsample, m)?)?;
    m.add_function(wrap_pyfunction!(lift, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_geo_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_img_features, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(gen_scene, m)?)?;
    Ok(())
}

//! Python bindings: scenes, cameras, rendering, edits, proximity search
//! and the toy-scene generator.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use genie_core::edit::{apply_transform, rotation_about, scale_about, translation, Selection};
use genie_core::io::dataset::{focal_from_fov, load_dataset, write_dataset};
use genie_core::io::toy::{gaussians_from_points, generate_toy_scene, ToySpec};
use genie_core::rtgps::brute_force_query;
use genie_core::verify::{run_all, VerifyOptions};
use genie_core::{
    load_checkpoint, save_checkpoint, trainer::run_training, GenieError, RadiusMode, RunConfig, Trainer, Vec3,
};

fn err(e: GenieError) -> PyErr {
    match e {
        GenieError::Io { .. } => PyIOError::new_err(e.to_string()),
        GenieError::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn selection(indices: Option<Vec<usize>>) -> Selection {
    indices.map_or(Selection::All, Selection::Indices)
}

#[pyclass(name = "Camera", module = "genie", from_py_object)]
#[derive(Clone)]
pub struct PyCamera {
    inner: genie_core::Camera,
}

#[pymethods]
impl PyCamera {
    /// Pinhole camera at `eye` looking at `target`.
    #[staticmethod]
    #[pyo3(signature = (eye, target, width, height, fov_degrees=40.0, up=(0.0, 1.0, 0.0), near=0.01, far=100.0))]
    #[allow(clippy::too_many_arguments)]
    fn look_at(
        eye: (f64, f64, f64),
        target: (f64, f64, f64),
        width: u32,
        height: u32,
        fov_degrees: f64,
        up: (f64, f64, f64),
        near: f64,
        far: f64,
    ) -> PyResult<Self> {
        let v = |t: (f64, f64, f64)| Vec3::new(t.0, t.1, t.2);
        let focal = focal_from_fov(fov_degrees.to_radians(), width);
        let mut inner = genie_core::Camera::look_at(v(eye), v(target), v(up), focal, width, height);
        inner.near = near;
        inner.far = far;
        inner.validate().map_err(err)?;
        Ok(PyCamera { inner })
    }

    #[getter]
    fn width(&self) -> u32 {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height
    }

    #[getter]
    fn focal(&self) -> f64 {
        self.inner.focal
    }

    /// Row-major camera-to-world matrix.
    #[getter]
    fn pose(&self) -> Vec<f64> {
        self.inner.pose.transpose().as_slice().to_vec()
    }
}

#[pyclass(name = "Image", module = "genie")]
pub struct PyImage {
    inner: genie_core::Image,
}

#[pymethods]
impl PyImage {
    #[getter]
    fn width(&self) -> u32 {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height
    }

    /// Row-major RGB floats.
    fn rgb(&self) -> Vec<f64> {
        self.inner.rgb.clone()
    }

    fn alpha(&self) -> Vec<f64> {
        self.inner.acc_alpha.clone()
    }

    fn png<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.inner.encode_png().map_err(err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn mean_abs_diff(&self, other: &PyImage) -> f64 {
        self.inner.mean_abs_diff(&other.inner)
    }
}

#[pyclass(name = "Scene", module = "genie")]
pub struct PyScene {
    inner: genie_core::SceneBundle,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyScene {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.set.len()
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.set.epoch()
    }

    #[getter]
    fn baked(&self) -> bool {
        self.inner.natural_mode() == genie_core::FeatureMode::Baked
    }

    fn means(&self) -> Vec<(f64, f64, f64)> {
        self.inner.set.gaussians().iter().map(|g| (g.mean.x, g.mean.y, g.mean.z)).collect()
    }

    fn confidences(&self) -> Vec<f64> {
        self.inner.set.gaussians().iter().map(|g| g.confidence).collect()
    }

    #[pyo3(signature = (camera, seed=0, samples=None))]
    fn render(&self, py: Python<'_>, camera: &PyCamera, seed: u64, samples: Option<usize>) -> PyResult<PyImage> {
        let mut render = self.inner.config.render.clone();
        render.seed = seed;
        if let Some(n) = samples {
            render.samples_per_ray = n;
        }
        let b = &self.inner;
        let img = py
            .detach(|| {
                let splash = b.render_splash(None);
                let index = b.build_index()?;
                b.render(&camera.inner, index.as_ref(), &splash, &render)
            })
            .map_err(err)?;
        Ok(PyImage { inner: img })
    }

    #[pyo3(signature = (offset, indices=None))]
    fn translate(&mut self, offset: (f64, f64, f64), indices: Option<Vec<usize>>) -> PyResult<()> {
        let m = translation(Vec3::new(offset.0, offset.1, offset.2));
        apply_transform(&mut self.inner.set, &selection(indices), &m).map_err(err)
    }

    #[pyo3(signature = (axis, degrees, center=(0.0, 0.0, 0.0), indices=None))]
    fn rotate(
        &mut self,
        axis: (f64, f64, f64),
        degrees: f64,
        center: (f64, f64, f64),
        indices: Option<Vec<usize>>,
    ) -> PyResult<()> {
        let m = rotation_about(
            Vec3::new(axis.0, axis.1, axis.2),
            degrees,
            Vec3::new(center.0, center.1, center.2),
        )
        .map_err(err)?;
        apply_transform(&mut self.inner.set, &selection(indices), &m).map_err(err)
    }

    #[pyo3(signature = (factor, center=(0.0, 0.0, 0.0), indices=None))]
    fn scale(&mut self, factor: f64, center: (f64, f64, f64), indices: Option<Vec<usize>>) -> PyResult<()> {
        let m = scale_about(Vec3::repeat(factor), Vec3::new(center.0, center.1, center.2));
        apply_transform(&mut self.inner.set, &selection(indices), &m).map_err(err)
    }

    /// Runs the self-checks; returns `(name, passed, detail)` tuples.
    #[pyo3(signature = (queries=100, trials=50, seed=0))]
    fn verify(&self, py: Python<'_>, queries: usize, trials: usize, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
        let b = &self.inner;
        let results = py
            .detach(|| {
                let index = b.build_index()?.ok_or(GenieError::EmptyScene)?;
                let opts = VerifyOptions {
                    queries,
                    drop_trials: trials,
                    seed,
                    ..Default::default()
                };
                run_all(&b.set, &index, &b.grid, &b.net, &b.render_splash(None), &opts)
            })
            .map_err(err)?;
        Ok(results.into_iter().map(|r| (r.name, r.passed, r.detail)).collect())
    }
}

/// Proximity index over explicit means and per-axis variances.
#[pyclass(name = "ProximityIndex", module = "genie")]
pub struct PyProximityIndex {
    set: genie_core::GaussianSet,
    index: genie_core::ProximityIndex,
}

#[pymethods]
impl PyProximityIndex {
    #[new]
    #[pyo3(signature = (means, variances, q=2.0))]
    fn new(means: Vec<(f64, f64, f64)>, variances: Vec<(f64, f64, f64)>, q: f64) -> PyResult<Self> {
        if means.len() != variances.len() {
            return Err(PyValueError::new_err("means and variances differ in length"));
        }
        let gs = means
            .iter()
            .zip(&variances)
            .map(|(m, v)| {
                genie_core::Gaussian::new(Vec3::new(m.0, m.1, m.2), Vec3::new(v.0.ln(), v.1.ln(), v.2.ln()), 0)
            })
            .collect();
        let set = genie_core::GaussianSet::new(gs);
        let index = genie_core::ProximityIndex::build(&set, q).map_err(err)?;
        Ok(PyProximityIndex { set, index })
    }

    fn __len__(&self) -> usize {
        self.set.len()
    }

    /// `(indices, overflowed)` for the `k` nearest containing spheres.
    fn query(&self, x: (f64, f64, f64), k: usize) -> PyResult<(Vec<usize>, bool)> {
        let r = self.index.query(&self.set, &Vec3::new(x.0, x.1, x.2), k).map_err(err)?;
        Ok((r.indices, r.overflowed))
    }

    fn brute_force(&self, x: (f64, f64, f64), k: usize) -> (Vec<usize>, bool) {
        let r = brute_force_query(&self.set, &Vec3::new(x.0, x.1, x.2), k, self.index.q(), RadiusMode::Sqrt);
        (r.indices, r.overflowed)
    }

    fn radii(&self) -> Vec<f64> {
        self.index.radii().to_vec()
    }
}

/// Writes the toy dataset into `out_dir`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, size=64, cameras=8, blobs=3))]
fn generate_toy(out_dir: PathBuf, seed: u64, size: u32, cameras: usize, blobs: usize) -> PyResult<PathBuf> {
    let spec = ToySpec {
        width: size,
        height: size,
        cameras,
        blobs,
        ..Default::default()
    };
    write_dataset(&out_dir, &generate_toy_scene(&spec, seed).dataset).map_err(err)
}

/// Trains on a dataset with the toy preset (or a TOML config) and
/// returns the baked scene.
#[pyfunction]
#[pyo3(signature = (dataset, steps, config=None, seed=0, out=None))]
fn train(
    py: Python<'_>,
    dataset: PathBuf,
    steps: u64,
    config: Option<PathBuf>,
    seed: u64,
    out: Option<PathBuf>,
) -> PyResult<PyScene> {
    let bundle = py
        .detach(|| {
            let data = load_dataset(&dataset)?;
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::toy(),
            };
            cfg.train.set_steps(steps);
            cfg.train.seed = seed;
            cfg.render.background = data.background;
            let init = gaussians_from_points(&data.init_points, cfg.train.densify.init_log_scale);
            let mut trainer = Trainer::new(cfg, init)?;
            run_training(&mut trainer, &data, out.as_deref(), |_| {})
        })
        .map_err(err)?;
    Ok(PyScene { inner: bundle })
}

#[pymodule]
fn genie(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCamera>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyProximityIndex>()?;
    m.add_function(wrap_pyfunction!(generate_toy, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

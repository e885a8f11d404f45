//! Edit-time manipulation of baked Gaussians: affine transforms, triangle
//! soup export, mesh binding and mesh-driven deformation.
//!
//! Deformation is written as a displacement from the rest pose so that the
//! rest frame reproduces the bound means exactly. Covariance stays
//! diagonal: the deformation Jacobian only rescales each axis.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Unit};
use serde::{Deserialize, Serialize};

use crate::error::{GenieError, Result};
use crate::io::obj;
use crate::scene::{GaussianSet, Mat4, Vec3};

const DEGENERATE_AREA: f64 = 1e-12;
const SINGULAR_DET: f64 = 1e-12;

/// Gaussians to edit, resolved against the current means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Selection {
    All,
    Indices(Vec<usize>),
    Sphere { center: [f64; 3], radius: f64 },
    Aabb { min: [f64; 3], max: [f64; 3] },
}

impl Selection {
    /// Sorted, unique indices.
    pub fn resolve(&self, set: &GaussianSet) -> Result<Vec<usize>> {
        let n = set.len();
        let pick = |f: &dyn Fn(&Vec3) -> bool| {
            (0..n).filter(|&i| f(&set.get(i).mean)).collect::<Vec<_>>()
        };
        Ok(match self {
            Selection::All => (0..n).collect(),
            Selection::Indices(ix) => {
                if let Some(&bad) = ix.iter().find(|&&i| i >= n) {
                    return Err(GenieError::InvalidSelection { index: bad, len: n });
                }
                let mut v = ix.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
            Selection::Sphere { center, radius } => {
                let c = Vec3::from(*center);
                pick(&|m| (m - c).norm() <= *radius)
            }
            Selection::Aabb { min, max } => {
                pick(&|m| (0..3).all(|a| m[a] >= min[a] && m[a] <= max[a]))
            }
        })
    }
}

fn require_baked(set: &GaussianSet, idx: &[usize]) -> Result<()> {
    match idx.iter().find(|&&i| !set.get(i).baked) {
        Some(&i) => Err(GenieError::NotBaked(i)),
        None => Ok(()),
    }
}

/// Maps the selected means through the affine `transform` and scales each
/// variance axis by the squared norm of the matching column of its linear
/// part. One epoch bump, even for an empty selection.
pub fn apply_transform(set: &mut GaussianSet, selection: &Selection, transform: &Mat4) -> Result<()> {
    let idx = selection.resolve(set)?;
    require_baked(set, &idx)?;
    if !transform.iter().all(|v| v.is_finite()) {
        return Err(GenieError::NonFinite("transform"));
    }
    let row = transform.row(3);
    if row[0] != 0.0 || row[1] != 0.0 || row[2] != 0.0 || row[3] != 1.0 {
        return Err(GenieError::InvalidConfig("transform bottom row must be [0, 0, 0, 1]".into()));
    }
    let lin: Matrix3<f64> = transform.fixed_view::<3, 3>(0, 0).into_owned();
    let det = lin.determinant();
    if det.abs() < SINGULAR_DET {
        return Err(GenieError::SingularTransform(det));
    }
    let t: Vec3 = transform.fixed_view::<3, 1>(0, 3).into_owned();
    let dlog = Vec3::from_fn(|a, _| 2.0 * lin.column(a).norm().ln());
    set.mutate(|gs| {
        for &i in &idx {
            let g = &mut gs[i];
            g.mean = lin * g.mean + t;
            g.log_scale += dlog;
        }
    });
    Ok(())
}

pub fn translation(offset: Vec3) -> Mat4 {
    Mat4::new_translation(&offset)
}

/// Rotation by `degrees` about `axis` through `center`.
pub fn rotation_about(axis: Vec3, degrees: f64, center: Vec3) -> Result<Mat4> {
    let axis = Unit::try_new(axis, 1e-12)
        .ok_or_else(|| GenieError::InvalidConfig("rotation axis must be non-zero".into()))?;
    let r = Rotation3::from_axis_angle(&axis, degrees.to_radians()).to_homogeneous();
    Ok(translation(center) * r * translation(-center))
}

/// Per-axis scale about `center`.
pub fn scale_about(factor: Vec3, center: Vec3) -> Mat4 {
    translation(center) * Mat4::new_nonuniform_scaling(&factor) * translation(-center)
}

/// Indexed triangles with an optional sequence of deformed vertex frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    /// Rest pose.
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Deformed vertex positions per frame; frame 0 is the rest pose.
    pub frames: Vec<Vec<Vec3>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = TriMesh {
            frames: vec![vertices.clone()],
            vertices,
            faces,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|i| *i >= n)) {
            return Err(GenieError::Mesh(format!("face {f:?} out of range for {n} vertices")));
        }
        if let Some(k) = self.frames.iter().position(|f| f.len() != n) {
            return Err(GenieError::Mesh(format!("frame {k} has {} vertices, expected {n}", self.frames[k].len())));
        }
        Ok(())
    }

    pub fn triangle(&self, verts: &[Vec3], f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| verts[i])
    }
}

pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    let m = obj::read_obj(path)?;
    TriMesh::new(m.vertices, m.faces)
}

pub fn frame_file_name(frame: usize) -> String {
    format!("frame_{frame:04}.obj")
}

/// Loads `frame_0000.obj`, `frame_0001.obj`, ... from `dir`; frame 0 is
/// the rest pose and every frame must share its face list.
pub fn load_mesh_sequence(dir: &Path) -> Result<TriMesh> {
    let mut frames = Vec::new();
    let mut faces = None;
    loop {
        let p: PathBuf = dir.join(frame_file_name(frames.len()));
        if !p.exists() {
            break;
        }
        let m = obj::read_obj(&p)?;
        match &faces {
            None => faces = Some(m.faces),
            Some(f) if *f != m.faces => {
                return Err(GenieError::Mesh(format!("{}: topology differs from frame 0", p.display())))
            }
            _ => {}
        }
        frames.push(m.vertices);
    }
    let Some(faces) = faces else {
        return Err(GenieError::Mesh(format!("{}: no {} found", dir.display(), frame_file_name(0))));
    };
    let mesh = TriMesh {
        vertices: frames[0].clone(),
        faces,
        frames,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Loads a single OBJ or, for a directory, a frame sequence.
pub fn load_mesh_any(path: &Path) -> Result<TriMesh> {
    if path.is_dir() {
        load_mesh_sequence(path)
    } else {
        load_mesh(path)
    }
}

/// Axes sorted by decreasing variance, ties by axis order.
fn principal_axes(var: &Vec3) -> [usize; 3] {
    let mut axes = [0, 1, 2];
    axes.sort_by(|a, b| var[*b].total_cmp(&var[*a]));
    axes
}

/// One triangle per Gaussian with centroid at the mean and edges along the
/// two largest-variance axes, each of half-length `q * std`.
pub fn export_triangle_soup(set: &GaussianSet, q: f64) -> TriMesh {
    let mut vertices = Vec::with_capacity(3 * set.len());
    let mut faces = Vec::with_capacity(set.len());
    for (i, g) in set.gaussians().iter().enumerate() {
        let var = g.variance();
        let [a, b, _] = principal_axes(&var);
        let mut e1 = Vec3::zeros();
        let mut e2 = Vec3::zeros();
        e1[a] = 2.0 * q * var[a].sqrt();
        e2[b] = 2.0 * q * var[b].sqrt();
        let p0 = g.mean - (e1 + e2) / 3.0;
        vertices.extend([p0, p0 + e1, p0 + e2]);
        faces.push([3 * i, 3 * i + 1, 3 * i + 2]);
    }
    TriMesh {
        frames: vec![vertices.clone()],
        vertices,
        faces,
    }
}

/// Closest point on triangle `abc` to `p` as barycentric weights.
pub fn closest_point_barycentric(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> [f64; 3] {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}

fn bary_point(tri: &[Vec3; 3], b: &[f64; 3]) -> Vec3 {
    tri[0] * b[0] + tri[1] * b[1] + tri[2] * b[2]
}

/// `(unit normal, area)`; area 0 and a zero normal for degenerate input.
fn normal_area(tri: &[Vec3; 3]) -> (Vec3, f64) {
    let n = (tri[1] - tri[0]).cross(&(tri[2] - tri[0]));
    let len = n.norm();
    if len == 0.0 {
        (Vec3::zeros(), 0.0)
    } else {
        (n / len, 0.5 * len)
    }
}

/// Surface anchor of a binding on a triangle: the barycentric point pushed
/// along the normal by `offset * sqrt(area)`.
fn anchor(tri: &[Vec3; 3], bary: &[f64; 3], offset: f64) -> Option<Vec3> {
    let (n, area) = normal_area(tri);
    (area >= DEGENERATE_AREA).then(|| bary_point(tri, bary) + n * (offset * area.sqrt()))
}

/// Columns `[e1, e2, n * sqrt(area)]` of a triangle's local frame.
fn local_frame(tri: &[Vec3; 3]) -> Matrix3<f64> {
    let (n, area) = normal_area(tri);
    Matrix3::from_columns(&[tri[1] - tri[0], tri[2] - tri[0], n * area.sqrt()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundGaussian {
    pub triangle: usize,
    pub barycentric: [f64; 3],
    /// Signed normal distance over `sqrt(rest area)`.
    pub normal_offset: f64,
    /// Rest-pose edge vectors `b - a` and `c - a`.
    pub rest_edges: [Vec3; 2],
    pub rest_mean: Vec3,
    pub rest_log_scale: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshBinding {
    pub entries: Vec<BoundGaussian>,
    pub face_count: usize,
}

/// Binds every Gaussian to its nearest non-degenerate rest triangle, ties
/// to the lowest face index.
pub fn bind_to_mesh(set: &GaussianSet, mesh: &TriMesh) -> Result<MeshBinding> {
    require_baked(set, &(0..set.len()).collect::<Vec<_>>())?;
    mesh.validate()?;
    let usable: Vec<usize> = (0..mesh.faces.len())
        .filter(|&f| normal_area(&mesh.triangle(&mesh.vertices, f)).1 >= DEGENERATE_AREA)
        .collect();
    if usable.is_empty() {
        return Err(GenieError::Mesh("mesh has no non-degenerate triangles".into()));
    }
    let entries = set
        .gaussians()
        .iter()
        .map(|g| {
            let mut best = (f64::INFINITY, 0, [0.0; 3]);
            for &f in &usable {
                let tri = mesh.triangle(&mesh.vertices, f);
                let b = closest_point_barycentric(&g.mean, &tri[0], &tri[1], &tri[2]);
                let d = (g.mean - bary_point(&tri, &b)).norm_squared();
                if d < best.0 {
                    best = (d, f, b);
                }
            }
            let (_, f, b) = best;
            let tri = mesh.triangle(&mesh.vertices, f);
            let (n, area) = normal_area(&tri);
            let offset = (g.mean - bary_point(&tri, &b)).dot(&n) / area.sqrt();
            BoundGaussian {
                triangle: f,
                barycentric: b,
                normal_offset: offset,
                rest_edges: [tri[1] - tri[0], tri[2] - tri[0]],
                rest_mean: g.mean,
                rest_log_scale: g.log_scale,
            }
        })
        .collect();
    Ok(MeshBinding {
        entries,
        face_count: mesh.faces.len(),
    })
}

/// Moves bound Gaussians with `mesh.frames[frame]`. Gaussians whose
/// deformed triangle is degenerate keep their current pose; their indices
/// are returned.
pub fn deform_from_mesh(
    set: &mut GaussianSet,
    binding: &MeshBinding,
    mesh: &TriMesh,
    frame: usize,
) -> Result<Vec<usize>> {
    if frame >= mesh.frames.len() {
        return Err(GenieError::FrameOutOfRange {
            frame,
            len: mesh.frames.len(),
        });
    }
    if binding.entries.len() != set.len() || binding.face_count != mesh.faces.len() {
        return Err(GenieError::Mesh(format!(
            "binding covers {} gaussians on {} faces; scene has {} gaussians, mesh {} faces",
            binding.entries.len(),
            binding.face_count,
            set.len(),
            mesh.faces.len()
        )));
    }
    let verts = &mesh.frames[frame];
    let mut frozen = Vec::new();
    set.mutate(|gs| {
        for (i, (g, b)) in gs.iter_mut().zip(&binding.entries).enumerate() {
            let rest = mesh.triangle(&mesh.vertices, b.triangle);
            let cur = mesh.triangle(verts, b.triangle);
            let (Some(p0), Some(p1)) = (
                anchor(&rest, &b.barycentric, b.normal_offset),
                anchor(&cur, &b.barycentric, b.normal_offset),
            ) else {
                frozen.push(i);
                continue;
            };
            g.mean = b.rest_mean + (p1 - p0);
            let Some(inv) = local_frame(&rest).try_inverse() else {
                frozen.push(i);
                continue;
            };
            let jac = local_frame(&cur) * inv;
            g.log_scale = b.rest_log_scale + Vec3::from_fn(|a, _| 2.0 * jac.column(a).norm().ln());
        }
    });
    if !frozen.is_empty() {
        log::warn!(
            "frame {frame}: {} gaussians on degenerate triangles kept their last pose",
            frozen.len()
        );
    }
    Ok(frozen)
}

/// Scale factor, uniform or per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScaleFactor {
    Uniform(f64),
    PerAxis([f64; 3]),
}

impl ScaleFactor {
    pub fn vector(&self) -> Vec3 {
        match self {
            ScaleFactor::Uniform(s) => Vec3::repeat(*s),
            ScaleFactor::PerAxis(v) => Vec3::from(*v),
        }
    }
}

/// One scripted or requested edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditOp {
    Translate {
        selection: Selection,
        offset: [f64; 3],
    },
    Rotate {
        selection: Selection,
        axis: [f64; 3],
        degrees: f64,
        #[serde(default)]
        center: [f64; 3],
    },
    Scale {
        selection: Selection,
        factor: ScaleFactor,
        #[serde(default)]
        center: [f64; 3],
    },
    /// Row-major 4x4 affine matrix.
    Transform {
        selection: Selection,
        matrix: [f64; 16],
    },
    /// Binds the whole scene to a mesh file or frame-sequence directory.
    Bind { mesh: PathBuf },
    DeformFrame { frame: usize },
}

/// A scene plus the mesh binding used by deform edits.
#[derive(Clone, Debug)]
pub struct EditSession {
    pub set: GaussianSet,
    pub mesh: Option<(TriMesh, MeshBinding)>,
}

impl EditSession {
    pub fn new(set: GaussianSet) -> Self {
        EditSession { set, mesh: None }
    }

    pub fn bind(&mut self, mesh: TriMesh) -> Result<()> {
        let binding = bind_to_mesh(&self.set, &mesh)?;
        self.mesh = Some((mesh, binding));
        Ok(())
    }

    /// Applies `op`; relative paths in `Bind` resolve against `base`.
    pub fn apply(&mut self, op: &EditOp, base: &Path) -> Result<()> {
        match op {
            EditOp::Translate { selection, offset } => {
                apply_transform(&mut self.set, selection, &translation(Vec3::from(*offset)))
            }
            EditOp::Rotate {
                selection,
                axis,
                degrees,
                center,
            } => {
                let m = rotation_about(Vec3::from(*axis), *degrees, Vec3::from(*center))?;
                apply_transform(&mut self.set, selection, &m)
            }
            EditOp::Scale {
                selection,
                factor,
                center,
            } => apply_transform(
                &mut self.set,
                selection,
                &scale_about(factor.vector(), Vec3::from(*center)),
            ),
            EditOp::Transform { selection, matrix } => {
                apply_transform(&mut self.set, selection, &Mat4::from_row_slice(matrix))
            }
            EditOp::Bind { mesh } => self.bind(load_mesh_any(&base.join(mesh))?),
            EditOp::DeformFrame { frame } => {
                let (mesh, binding) = self
                    .mesh
                    .as_ref()
                    .ok_or_else(|| GenieError::Mesh("deform_frame requires a bound mesh".into()))?;
                deform_from_mesh(&mut self.set, binding, mesh, *frame).map(|_| ())
            }
        }
    }
}

/// Declarative edit script: a list of `[[edit]]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditScript {
    #[serde(default)]
    pub edit: Vec<EditOp>,
}

impl EditScript {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GenieError::io(path, e))?;
        toml::from_str(&text).map_err(|e| GenieError::parse(path, e))
    }
}

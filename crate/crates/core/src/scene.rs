//! Core scene types: Gaussians, cameras and rays.
//!
//! Covariances are diagonal with an identity rotation, stored as the log of
//! the per-axis variances. The full `R S Sᵀ Rᵀ` factorization is not
//! represented.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{GenieError, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat4 = Matrix4<f64>;

/// A single editable primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vec3,
    /// Log of the diagonal covariance entries.
    pub log_scale: Vec3,
    /// Latent feature; only meaningful once `baked` is set.
    pub feature: Vec<f64>,
    /// Usage confidence in `[0, 1]`, driven by pruning.
    pub confidence: f64,
    pub baked: bool,
}

impl Gaussian {
    pub fn new(mean: Vec3, log_scale: Vec3, feature_dim: usize) -> Self {
        Gaussian {
            mean,
            log_scale,
            feature: vec![0.0; feature_dim],
            confidence: 1.0,
            baked: false,
        }
    }

    pub fn isotropic(mean: Vec3, variance: f64, feature_dim: usize) -> Self {
        let l = variance.ln();
        Self::new(mean, Vec3::new(l, l, l), feature_dim)
    }

    /// Diagonal covariance entries, `exp(log_scale)`.
    #[inline]
    pub fn variance(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    /// Diagonal of the inverse covariance, `exp(-log_scale)`.
    #[inline]
    pub fn inv_variance(&self) -> Vec3 {
        self.log_scale.map(|c| (-c).exp())
    }

    /// Squared Mahalanobis distance from `x`.
    #[inline]
    pub fn mahalanobis_sq(&self, x: &Vec3) -> f64 {
        let d = x - self.mean;
        let inv = self.inv_variance();
        d.x * d.x * inv.x + d.y * d.y * inv.y + d.z * d.z * inv.z
    }
}

/// Ordered set of Gaussians with an edit epoch.
///
/// Every mutation goes through [`GaussianSet::mutate`], which bumps the
/// epoch exactly once. Indices are stable within one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    gaussians: Vec<Gaussian>,
    epoch: u64,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        GaussianSet { gaussians, epoch: 0 }
    }

    pub fn with_epoch(gaussians: Vec<Gaussian>, epoch: u64) -> Self {
        GaussianSet { gaussians, epoch }
    }

    #[inline]
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    #[inline]
    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    #[inline]
    pub fn get(&self, i: usize) -> &Gaussian {
        &self.gaussians[i]
    }

    /// Applies one mutation batch and bumps the epoch.
    pub fn mutate<R>(&mut self, f: impl FnOnce(&mut Vec<Gaussian>) -> R) -> R {
        let r = f(&mut self.gaussians);
        self.epoch += 1;
        r
    }

    pub fn into_parts(self) -> (Vec<Gaussian>, u64) {
        (self.gaussians, self.epoch)
    }

    /// Axis-aligned bounds of all means, `None` when empty.
    pub fn mean_bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = self.gaussians.first()?.mean;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| {
            (lo.inf(&g.mean), hi.sup(&g.mean))
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub field: &'static str,
    pub message: String,
}

/// Checks every Gaussian against the type invariants.
pub fn validate_scene(set: &GaussianSet, feature_dim: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    for (index, g) in set.gaussians().iter().enumerate() {
        let mut push = |field, message: String| {
            out.push(Violation {
                index,
                field,
                message,
            })
        };
        if !g.mean.iter().all(|v| v.is_finite()) {
            push("mean", format!("non-finite mean {:?}", g.mean.as_slice()));
        }
        let var = g.variance();
        if !var.iter().all(|v| v.is_finite() && *v > 0.0) {
            push(
                "log_scale",
                format!("variance {:?} must be finite and positive", var.as_slice()),
            );
        }
        if !(0.0..=1.0).contains(&g.confidence) {
            push(
                "confidence",
                format!("confidence {} outside [0, 1]", g.confidence),
            );
        }
        if g.feature.len() != feature_dim {
            push(
                "feature",
                format!("feature length {} != {}", g.feature.len(), feature_dim),
            );
        } else if !g.feature.iter().all(|v| v.is_finite()) {
            push("feature", "non-finite feature entry".to_string());
        }
    }
    out
}

/// Pinhole camera, OpenGL convention: looks down `-z` with `+y` up in
/// camera space. `pose` is camera-to-world.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub pose: Mat4,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(GenieError::InvalidCamera(format!(
                "focal must be positive, got {}",
                self.focal
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GenieError::InvalidCamera(format!(
                "empty image {}x{}",
                self.width, self.height
            )));
        }
        if !(self.near < self.far) || !self.near.is_finite() || !self.far.is_finite() {
            return Err(GenieError::InvalidCamera(format!(
                "need near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if !self.pose.iter().all(|v| v.is_finite()) {
            return Err(GenieError::InvalidCamera("non-finite pose".into()));
        }
        let rot = self.rotation();
        let err = (rot.transpose() * rot - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(GenieError::InvalidCamera(format!(
                "pose rotation is not orthonormal (error {err:e})"
            )));
        }
        let last = self.pose.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(GenieError::InvalidCamera(
                "pose bottom row must be [0, 0, 0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn position(&self) -> Vec3 {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Horizontal field of view in radians.
    pub fn fov_x(&self) -> f64 {
        2.0 * (0.5 * self.width as f64 / self.focal).atan()
    }

    /// Camera at `eye` looking at `target`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: u32, height: u32) -> Self {
        let back = (eye - target).normalize();
        let right = up.cross(&back).normalize();
        let up = back.cross(&right);
        let mut pose = Mat4::identity();
        pose.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        pose.fixed_view_mut::<3, 1>(0, 1).copy_from(&up);
        pose.fixed_view_mut::<3, 1>(0, 2).copy_from(&back);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Camera {
            pose,
            focal,
            width,
            height,
            near: 0.01,
            far: 100.0,
        }
    }

    /// Ray through the center of pixel `(col, row)`; row 0 is the top.
    pub fn pixel_ray(&self, col: u32, row: u32) -> Ray {
        let dx = (col as f64 + 0.5 - 0.5 * self.width as f64) / self.focal;
        let dy = -(row as f64 + 0.5 - 0.5 * self.height as f64) / self.focal;
        let dir_cam = Vec3::new(dx, dy, -1.0);
        let direction = (self.rotation() * dir_cam).normalize();
        Ray {
            origin: self.position(),
            direction,
            t_near: self.near,
            t_far: self.far,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Clips `[t_near, t_far]` to an axis-aligned box, `None` on a miss.
    pub fn clip_to_box(&self, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = self.t_near;
        let mut t1 = self.t_far;
        for a in 0..3 {
            let inv = 1.0 / self.direction[a];
            let mut ta = (lo[a] - self.origin[a]) * inv;
            let mut tb = (hi[a] - self.origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            // NaN from 0 * inf when the origin sits on a slab plane
            if !ta.is_nan() {
                t0 = t0.max(ta);
            }
            if !tb.is_nan() {
                t1 = t1.min(tb);
            }
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// One ray per pixel through the pixel center, row-major from the top row.
pub fn generate_camera_rays(camera: &Camera) -> Result<Vec<Ray>> {
    camera.validate()?;
    let mut rays = Vec::with_capacity((camera.width * camera.height) as usize);
    for row in 0..camera.height {
        for col in 0..camera.width {
            rays.push(camera.pixel_ray(col, row));
        }
    }
    Ok(rays)
}

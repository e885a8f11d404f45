//! JSON camera descriptions shared by the CLI and the service.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GenieError, Result};
use crate::io::dataset::{focal_from_fov, DEFAULT_FAR, DEFAULT_NEAR};
use crate::scene::{Camera, Mat4, Vec3};

fn default_near() -> f64 {
    DEFAULT_NEAR
}

fn default_far() -> f64 {
    DEFAULT_FAR
}

/// Either a row-major camera-to-world `pose` or `eye`/`target`/`up`, and
/// either `focal` in pixels or `fov_degrees` (horizontal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<[f64; 16]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eye: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub up: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov_degrees: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

impl CameraSpec {
    pub fn from_camera(c: &Camera) -> Self {
        let mut pose = [0.0; 16];
        for r in 0..4 {
            for col in 0..4 {
                pose[4 * r + col] = c.pose[(r, col)];
            }
        }
        CameraSpec {
            pose: Some(pose),
            eye: None,
            target: None,
            up: None,
            focal: Some(c.focal),
            fov_degrees: None,
            width: Some(c.width),
            height: Some(c.height),
            near: c.near,
            far: c.far,
        }
    }

    /// Builds the camera; `width`/`height` override the spec's own.
    pub fn to_camera(&self, width: Option<u32>, height: Option<u32>) -> Result<Camera> {
        let bad = |m: &str| GenieError::InvalidCamera(m.to_string());
        let width = width.or(self.width).ok_or_else(|| bad("missing width"))?;
        let height = height.or(self.height).ok_or_else(|| bad("missing height"))?;
        let focal = match (self.focal, self.fov_degrees) {
            (Some(f), None) => f,
            (None, Some(d)) => focal_from_fov(d.to_radians(), width),
            _ => return Err(bad("give exactly one of focal and fov_degrees")),
        };
        let pose = match (self.pose, self.eye) {
            (Some(p), None) => Mat4::from_row_slice(&p),
            (None, Some(eye)) => {
                let target = self.target.unwrap_or([0.0; 3]);
                let up = self.up.unwrap_or([0.0, 1.0, 0.0]);
                Camera::look_at(Vec3::from(eye), Vec3::from(target), Vec3::from(up), focal, width, height).pose
            }
            _ => return Err(bad("give exactly one of pose and eye")),
        };
        let cam = Camera {
            pose,
            focal,
            width,
            height,
            near: self.near,
            far: self.far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GenieError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GenieError::parse(path, e))
    }
}

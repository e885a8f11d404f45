//! Posed-image datasets in the transforms-JSON layout used by synthetic
//! NeRF scenes: a shared horizontal field of view and one camera-to-world
//! matrix per frame.
//!
//! Optional extension keys: `near`, `far`, `background`, `init_points`
//! (an OBJ file whose `v` lines seed the Gaussians) and `aabb`.

use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{GenieError, Result};
use crate::io::obj;
use crate::scene::{Camera, Vec3};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub file_path: String,
    pub transform_matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub camera_angle_x: f64,
    pub frames: Vec<ManifestFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_points: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aabb: Option<[[f64; 3]; 2]>,
}

pub const DEFAULT_NEAR: f64 = 0.05;
pub const DEFAULT_FAR: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub name: String,
    pub camera: Camera,
    /// Linear RGB in `[0, 1]`, composited over the background, row-major.
    pub rgb: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub width: u32,
    pub height: u32,
    pub background: [f64; 3],
    pub frames: Vec<Frame>,
    pub init_points: Vec<Vec3>,
    pub aabb: Option<[[f64; 3]; 2]>,
}

pub fn focal_from_fov(fov_x: f64, width: u32) -> f64 {
    width as f64 / (2.0 * (fov_x / 2.0).tan())
}

pub fn fov_from_focal(focal: f64, width: u32) -> f64 {
    2.0 * (width as f64 / (2.0 * focal)).atan()
}

fn pose_from_rows(rows: &[Vec<f64>]) -> Option<Matrix4<f64>> {
    if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
        return None;
    }
    Some(Matrix4::from_fn(|r, c| rows[r][c]))
}

/// Resolves a manifest image path; a missing extension means `.png`.
fn image_path(root: &Path, file_path: &str) -> PathBuf {
    let p = root.join(file_path);
    if p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

fn decode_image(path: &Path, background: [f64; 3]) -> Result<(u32, u32, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|e| GenieError::Dataset(format!("{}: {e}", path.display())))?
        .to_rgba8();
    let (w, h) = img.dimensions();
    let mut rgb = Vec::with_capacity((3 * w * h) as usize);
    for px in img.pixels() {
        let a = px[3] as f64 / 255.0;
        for c in 0..3 {
            rgb.push(px[c] as f64 / 255.0 * a + background[c] * (1.0 - a));
        }
    }
    Ok((w, h, rgb))
}

/// Loads a manifest and decodes every frame, in manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| GenieError::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| GenieError::parse(manifest_path, e))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let background = manifest.background.unwrap_or([1.0; 3]);
    let near = manifest.near.unwrap_or(DEFAULT_NEAR);
    let far = manifest.far.unwrap_or(DEFAULT_FAR);
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut dims: Option<(u32, u32)> = None;
    for (i, f) in manifest.frames.iter().enumerate() {
        let pose = pose_from_rows(&f.transform_matrix).ok_or_else(|| {
            GenieError::Dataset(format!("frame {i} ({}): transform_matrix is not 4x4", f.file_path))
        })?;
        let path = image_path(root, &f.file_path);
        if !path.exists() {
            return Err(GenieError::Dataset(format!(
                "frame {i}: missing image {}",
                path.display()
            )));
        }
        let (w, h, rgb) = decode_image(&path, background)?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(GenieError::Dataset(format!(
                    "frame {i}: image is {w}x{h}, expected {}x{}",
                    d.0, d.1
                )))
            }
            _ => {}
        }
        let camera = Camera {
            pose,
            focal: focal_from_fov(manifest.camera_angle_x, w),
            width: w,
            height: h,
            near,
            far,
        };
        camera
            .validate()
            .map_err(|e| GenieError::Dataset(format!("frame {i} ({}): {e}", f.file_path)))?;
        frames.push(Frame {
            name: f.file_path.clone(),
            camera,
            rgb,
        });
    }
    let init_points = match &manifest.init_points {
        Some(p) => obj::read_obj(&root.join(p))?.vertices,
        None => Vec::new(),
    };
    let (width, height) = dims.unwrap_or((0, 0));
    Ok(Dataset {
        width,
        height,
        background,
        frames,
        init_points,
        aabb: manifest.aabb,
    })
}

fn to_rgb8(rgb: &[f64]) -> Vec<u8> {
    rgb.iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Writes `data` as `<dir>/transforms.json` plus one PNG per frame (and
/// `points.obj` when there are init points).
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| GenieError::io(dir, e))?;
    let mut frames = Vec::new();
    for (i, f) in data.frames.iter().enumerate() {
        let name = format!("r_{i}");
        let path = dir.join(format!("{name}.png"));
        image::save_buffer(&path, &to_rgb8(&f.rgb), data.width, data.height, image::ExtendedColorType::Rgb8)
            .map_err(|e| GenieError::Dataset(format!("{}: {e}", path.display())))?;
        let pose = f.camera.pose;
        frames.push(ManifestFrame {
            file_path: format!("./{name}"),
            transform_matrix: (0..4).map(|r| (0..4).map(|c| pose[(r, c)]).collect()).collect(),
        });
    }
    let first = data.frames.first().map(|f| &f.camera);
    let init_points = if data.init_points.is_empty() {
        None
    } else {
        obj::write_obj(&dir.join("points.obj"), &data.init_points, &[])?;
        Some("points.obj".to_string())
    };
    let manifest = Manifest {
        camera_angle_x: first.map_or(std::f64::consts::FRAC_PI_2, |c| c.fov_x()),
        frames,
        near: first.map(|c| c.near),
        far: first.map(|c| c.far),
        background: Some(data.background),
        init_points,
        aabb: data.aabb,
    };
    let path = dir.join("transforms.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| GenieError::io(&path, e))?;
    Ok(path)
}

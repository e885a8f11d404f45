//! Procedural toy scenes: a few isotropic density blobs seen from a ring
//! of cameras. Ground-truth images come from direct quadrature of the blob
//! density along each ray, written here without touching the neural
//! renderer.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::dataset::{focal_from_fov, Dataset, Frame};
use crate::scene::{Camera, Gaussian, GaussianSet, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub blobs: usize,
    pub cameras: usize,
    pub width: u32,
    pub height: u32,
    pub ring_radius: f64,
    /// Camera height above the blob plane.
    pub ring_height: f64,
    pub fov_degrees: f64,
    /// Standard deviation of each blob.
    pub blob_sigma: f64,
    /// Peak density at a blob center.
    pub peak_density: f64,
    /// Radius of the circle the blob centers are spread around.
    pub spread: f64,
    pub reference_samples: usize,
    /// Lattice spacing of the initial point cloud.
    pub init_spacing: f64,
    pub background: [f64; 3],
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            blobs: 3,
            cameras: 8,
            width: 64,
            height: 64,
            ring_radius: 0.5,
            ring_height: 0.15,
            fov_degrees: 40.0,
            blob_sigma: 0.04,
            peak_density: 40.0,
            spread: 0.07,
            reference_samples: 512,
            init_spacing: 0.02,
            background: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: Vec3,
    pub sigma: f64,
    pub peak: f64,
    pub color: [f64; 3],
}

impl Blob {
    fn density(&self, x: &Vec3) -> f64 {
        self.peak * (-(x - self.center).norm_squared() / (2.0 * self.sigma * self.sigma)).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub blobs: Vec<Blob>,
    /// The blobs as Gaussians, with the blob color as a 3-d feature.
    pub truth: GaussianSet,
    pub dataset: Dataset,
}

/// Half-width of the cube that holds every toy blob and initial point.
pub const TOY_EXTENT: f64 = 0.25;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn make_blobs(spec: &ToySpec, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let n = spec.blobs;
    let phase = rng.random::<f64>() * 2.0 * PI;
    let hue0 = rng.random::<f64>();
    (0..n)
        .map(|b| {
            let a = phase + 2.0 * PI * b as f64 / n.max(1) as f64;
            let r = if n == 1 { 0.0 } else { spec.spread };
            let center = Vec3::new(
                r * a.cos(),
                (rng.random::<f64>() - 0.5) * spec.spread * 0.5,
                r * a.sin(),
            );
            Blob {
                center,
                sigma: spec.blob_sigma,
                peak: spec.peak_density,
                color: hsv((hue0 + b as f64 / n.max(1) as f64).fract(), 0.8, 0.9),
            }
        })
        .collect()
}

/// Camera-ring poses looking at the origin, `y` up.
pub fn ring_cameras(spec: &ToySpec) -> Vec<Camera> {
    let focal = focal_from_fov(spec.fov_degrees.to_radians(), spec.width);
    (0..spec.cameras)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / spec.cameras as f64;
            let eye = Vec3::new(spec.ring_radius * a.cos(), spec.ring_height, spec.ring_radius * a.sin());
            let mut cam = Camera::look_at(eye, Vec3::zeros(), Vec3::y(), focal, spec.width, spec.height);
            cam.near = 0.05;
            cam.far = 2.0 * (spec.ring_radius + TOY_EXTENT);
            cam
        })
        .collect()
}

/// Midpoint quadrature of the blob mixture along one ray, composited over
/// `background`. The emitted color at a point is the density-weighted
/// mean of the blob colors.
pub fn reference_pixel(
    blobs: &[Blob],
    origin: &Vec3,
    dir: &Vec3,
    t0: f64,
    t1: f64,
    samples: usize,
    background: [f64; 3],
) -> [f64; 3] {
    let dt = (t1 - t0) / samples as f64;
    let mut out = [0.0; 3];
    let mut trans = 1.0;
    for i in 0..samples {
        let x = origin + dir * (t0 + (i as f64 + 0.5) * dt);
        let mut sigma = 0.0;
        let mut col = [0.0; 3];
        for b in blobs {
            let d = b.density(&x);
            sigma += d;
            for c in 0..3 {
                col[c] += d * b.color[c];
            }
        }
        if sigma <= 0.0 {
            continue;
        }
        let a = 1.0 - (-sigma * dt).exp();
        for c in 0..3 {
            out[c] += trans * a * col[c] / sigma;
        }
        trans *= 1.0 - a;
    }
    for c in 0..3 {
        out[c] += trans * background[c];
    }
    out
}

/// Renders the blobs from `camera` with the reference integrator. Rays
/// are built from the pose directly and clipped to the toy cube.
pub fn reference_image(blobs: &[Blob], camera: &Camera, samples: usize, background: [f64; 3]) -> Vec<f64> {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let rot = camera.pose.fixed_view::<3, 3>(0, 0).into_owned();
    let origin: Vec3 = camera.pose.fixed_view::<3, 1>(0, 3).into_owned();
    let mut rgb = vec![0.0; 3 * w * h];
    rgb.par_chunks_mut(3).enumerate().for_each(|(p, px)| {
        let (col, row) = ((p % w) as f64, (p / w) as f64);
        let local = Vec3::new(
            (col + 0.5 - 0.5 * w as f64) / camera.focal,
            (0.5 * h as f64 - row - 0.5) / camera.focal,
            -1.0,
        );
        let dir = (rot * local).normalize();
        // slab test against the toy cube
        let (mut t0, mut t1) = (camera.near, camera.far);
        for a in 0..3 {
            let (u, v) = ((-TOY_EXTENT - origin[a]) / dir[a], (TOY_EXTENT - origin[a]) / dir[a]);
            t0 = t0.max(u.min(v));
            t1 = t1.min(u.max(v));
        }
        let c = if t0 < t1 {
            reference_pixel(blobs, &origin, &dir, t0, t1, samples, background)
        } else {
            background
        };
        px.copy_from_slice(&c);
    });
    rgb
}

/// Jittered lattice points within `2.5 sigma` of some blob center, with
/// points from overlapping blobs deduplicated.
pub fn initial_points(blobs: &[Blob], spacing: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut pts: Vec<Vec3> = Vec::new();
    let lim = (TOY_EXTENT / spacing).floor() as i64;
    for iz in -lim..=lim {
        for iy in -lim..=lim {
            for ix in -lim..=lim {
                let base = Vec3::new(ix as f64, iy as f64, iz as f64) * spacing;
                let jitter = Vec3::new(rng.random(), rng.random(), rng.random()).add_scalar(-0.5) * (0.5 * spacing);
                let p = base + jitter;
                if blobs.iter().any(|b| (p - b.center).norm() <= 2.5 * b.sigma) {
                    pts.push(p);
                }
            }
        }
    }
    pts
}

pub fn generate_toy_scene(spec: &ToySpec, seed: u64) -> ToyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = make_blobs(spec, &mut rng);
    let frames = ring_cameras(spec)
        .into_iter()
        .enumerate()
        .map(|(i, camera)| Frame {
            name: format!("r_{i}"),
            rgb: reference_image(&blobs, &camera, spec.reference_samples, spec.background),
            camera,
        })
        .collect();
    let init_points = initial_points(&blobs, spec.init_spacing, &mut rng);
    let truth = GaussianSet::new(
        blobs
            .iter()
            .map(|b| {
                let mut g = Gaussian::isotropic(b.center, b.sigma * b.sigma, 0);
                g.feature = b.color.to_vec();
                g
            })
            .collect(),
    );
    ToyScene {
        truth,
        dataset: Dataset {
            width: spec.width,
            height: spec.height,
            background: spec.background,
            frames,
            init_points,
            aabb: Some([[-TOY_EXTENT; 3], [TOY_EXTENT; 3]]),
        },
        blobs,
    }
}

/// Initial Gaussians at `points` with a shared isotropic variance.
pub fn gaussians_from_points(points: &[Vec3], log_scale: f64) -> GaussianSet {
    GaussianSet::new(
        points
            .iter()
            .map(|p| Gaussian::new(*p, Vec3::repeat(log_scale), 0))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToySpec {
        ToySpec {
            width: 16,
            height: 16,
            reference_samples: 128,
            ..Default::default()
        }
    }

    #[test]
    fn single_blob_dominates_center() {
        let spec = ToySpec {
            blobs: 1,
            ..small()
        };
        let toy = generate_toy_scene(&spec, 3);
        assert_eq!(toy.dataset.frames.len(), 8);
        let col = toy.blobs[0].color;
        for f in &toy.dataset.frames {
            let p = 3 * (8 * 16 + 8);
            let px = &f.rgb[p..p + 3];
            let err: f64 = (0..3).map(|c| (px[c] - col[c]).abs()).sum();
            assert!(err < 0.1, "{px:?} vs {col:?}");
        }
    }

    #[test]
    fn zero_blobs_render_background() {
        let toy = generate_toy_scene(&ToySpec { blobs: 0, ..small() }, 1);
        for f in &toy.dataset.frames {
            assert!(f.rgb.iter().all(|v| *v == 1.0));
        }
        assert!(toy.dataset.init_points.is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_toy_scene(&small(), 5);
        let b = generate_toy_scene(&small(), 5);
        assert_eq!(a, b);
        assert_ne!(a.blobs, generate_toy_scene(&small(), 6).blobs);
    }

    #[test]
    fn points_sit_inside_blobs_and_bounds() {
        let toy = generate_toy_scene(&small(), 2);
        assert!(!toy.dataset.init_points.is_empty());
        for p in &toy.dataset.init_points {
            assert!(p.iter().all(|v| v.abs() < TOY_EXTENT));
            assert!(toy.blobs.iter().any(|b| (p - b.center).norm() <= 2.5 * b.sigma + 1e-12));
        }
    }
}

//! Ray sampling, front-to-back compositing and image rendering.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GenieError, Result};
use crate::field::{BackwardScratch, FieldCache, FieldNetwork};
use crate::hashgrid::HashGrid;
use crate::rtgps::ProximityIndex;
use crate::scene::{Camera, GaussianSet, Ray, Vec3};
use crate::splash::{
    encode_with_table, weight_gradients, FeatureTable, SplashConfig, SplashOutput, SplashScratch,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub background: [f64; 3],
    pub seed: u64,
    /// Restrict samples to the bounds of all confidence spheres.
    pub clip_to_scene: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 64,
            stratified: false,
            background: [1.0; 3],
            seed: 0,
            clip_to_scene: true,
        }
    }
}

/// Sample positions `t` and spacings `Δ` along `[t_near, t_far]`.
///
/// The first sample sits at `t_near`; in stratified mode the others are
/// jittered within their uniform bins. `Δ_i = t_{i+1} - t_i` and the last
/// spacing runs to `t_far`, so the spacings sum to `t_far - t_near`.
pub fn sample_ray<R: Rng + ?Sized>(
    t_near: f64,
    t_far: f64,
    n: usize,
    stratified: bool,
    rng: &mut R,
) -> Vec<(f64, f64)> {
    debug_assert!(n >= 2 && t_near < t_far);
    let step = (t_far - t_near) / n as f64;
    let ts: Vec<f64> = (0..n)
        .map(|i| {
            let jitter = if stratified && i > 0 { rng.random::<f64>() } else { 0.0 };
            t_near + (i as f64 + jitter) * step
        })
        .collect();
    (0..n)
        .map(|i| {
            let next = if i + 1 < n { ts[i + 1] } else { t_far };
            (ts[i], next - ts[i])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeSample {
    pub sigma: f64,
    pub color: [f64; 3],
    pub delta: f64,
}

#[inline]
pub fn alpha(sigma: f64, delta: f64) -> f64 {
    -(-sigma * delta).exp_m1()
}

/// Front-to-back compositing over `background`: `(pixel, accumulated alpha)`.
pub fn composite(samples: &[CompositeSample], background: [f64; 3]) -> ([f64; 3], f64) {
    let mut pixel = [0.0; 3];
    let mut transmittance = 1.0;
    for s in samples {
        let a = alpha(s.sigma, s.delta);
        let w = transmittance * a;
        for c in 0..3 {
            pixel[c] += w * s.color[c];
        }
        transmittance *= 1.0 - a;
    }
    for c in 0..3 {
        pixel[c] += transmittance * background[c];
    }
    (pixel, 1.0 - transmittance)
}

/// Gradients `(dL/dsigma_i, dL/dcolor_i)` of the composited pixel.
pub fn composite_backward(
    samples: &[CompositeSample],
    background: [f64; 3],
    dpixel: [f64; 3],
) -> Vec<(f64, [f64; 3])> {
    let n = samples.len();
    // transmittance before and after each sample
    let mut trans = Vec::with_capacity(n + 1);
    trans.push(1.0);
    let mut alphas = Vec::with_capacity(n);
    for s in samples {
        let a = alpha(s.sigma, s.delta);
        alphas.push(a);
        let t = *trans.last().unwrap() * (1.0 - a);
        trans.push(t);
    }
    // suffix[i] = dpixel . (sum_{j>i} w_j c_j + T_n bg)
    let mut out = vec![(0.0, [0.0; 3]); n];
    let mut suffix: f64 = (0..3).map(|c| dpixel[c] * trans[n] * background[c]).sum();
    for i in (0..n).rev() {
        let s = &samples[i];
        let w = trans[i] * alphas[i];
        let dc = dpixel.map(|d| d * w);
        let own: f64 = (0..3).map(|c| dpixel[c] * s.color[c]).sum();
        let dsigma = s.delta * (trans[i + 1] * own - suffix);
        out[i] = (dsigma, dc);
        suffix += w * own;
    }
    out
}

/// Per-sample state kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct SampleRecord {
    pub t: f64,
    pub delta: f64,
    pub position: Vec3,
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub cache: Option<FieldCache>,
    pub sigma: f64,
    pub color: [f64; 3],
    pub alpha: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RayRecord {
    pub samples: Vec<SampleRecord>,
    pub pixel: [f64; 3],
    pub acc_alpha: f64,
}

impl RayRecord {
    /// Sample with the largest opacity.
    pub fn max_alpha_sample(&self) -> Option<&SampleRecord> {
        self.samples
            .iter()
            .fold(None, |best: Option<&SampleRecord>, s| match best {
                Some(b) if b.alpha >= s.alpha => Some(b),
                _ => Some(s),
            })
    }
}

/// Immutable view of everything a ray needs.
pub struct SceneView<'a> {
    pub set: &'a GaussianSet,
    pub index: Option<&'a ProximityIndex>,
    pub features: &'a FeatureTable,
    pub net: &'a FieldNetwork,
    pub splash: &'a SplashConfig,
    pub render: &'a RenderConfig,
}

impl<'a> SceneView<'a> {
    pub fn check(&self) -> Result<()> {
        match self.index {
            Some(idx) => idx.check_fresh(self.set),
            None if self.set.is_empty() => Ok(()),
            None => Err(GenieError::StaleIndex {
                built: u64::MAX,
                current: self.set.epoch(),
            }),
        }
    }

    /// Ray segment to integrate, `None` when it misses the scene.
    pub fn ray_extent(&self, ray: &Ray) -> Option<(f64, f64)> {
        let index = self.index?;
        if self.render.clip_to_scene {
            let (lo, hi) = index.bounds();
            ray.clip_to_box(&lo, &hi)
        } else {
            Some((ray.t_near, ray.t_far))
        }
    }
}

/// Scratch buffers for tracing rays on one thread.
#[derive(Default)]
pub struct TraceScratch {
    splash: SplashScratch,
    out: SplashOutput,
    cache: FieldCache,
    dir: Vec<f64>,
    comp: Vec<CompositeSample>,
}

/// Renders one ray. When `record` is given every sample is kept for the
/// backward pass.
pub fn trace_ray<R: Rng + ?Sized>(
    view: &SceneView,
    ray: &Ray,
    rng: &mut R,
    scratch: &mut TraceScratch,
    mut record: Option<&mut RayRecord>,
) -> ([f64; 3], f64) {
    let bg = view.render.background;
    if let Some(r) = record.as_deref_mut() {
        r.samples.clear();
    }
    let Some((t0, t1)) = view.ray_extent(ray) else {
        if let Some(r) = record {
            r.pixel = bg;
            r.acc_alpha = 0.0;
        }
        return (bg, 0.0);
    };
    let index = view.index.expect("extent implies an index");
    crate::field::encode_direction(
        &ray.direction,
        view.net.config().direction_frequencies,
        &mut scratch.dir,
    );
    let samples = sample_ray(t0, t1, view.render.samples_per_ray, view.render.stratified, rng);
    scratch.comp.clear();
    for (t, delta) in samples {
        let x = ray.at(t);
        encode_with_table(
            &x,
            view.set,
            index,
            view.features,
            view.splash.k,
            &mut scratch.splash,
            &mut scratch.out,
        );
        let (sigma, color) = if scratch.out.empty {
            (0.0, [0.0; 3])
        } else {
            view.net
                .forward_cached(&scratch.out.feature, &scratch.dir, &mut scratch.cache);
            (scratch.cache.sigma, scratch.cache.color)
        };
        scratch.comp.push(CompositeSample { sigma, color, delta });
        if let Some(r) = record.as_deref_mut() {
            r.samples.push(SampleRecord {
                t,
                delta,
                position: x,
                neighbors: scratch.out.neighbors.indices.clone(),
                weights: scratch.out.weights.clone(),
                cache: (!scratch.out.empty).then(|| scratch.cache.clone()),
                sigma,
                color,
                alpha: alpha(sigma, delta),
            });
        }
    }
    let (pixel, acc) = composite(&scratch.comp, bg);
    if let Some(r) = record {
        r.pixel = pixel;
        r.acc_alpha = acc;
    }
    (pixel, acc)
}

/// Gradients of a loss with respect to every trainable input of the ray
/// pipeline, dense over Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub net: Vec<f64>,
    pub feature_dim: usize,
    /// `dL/dfeature_i`, row-major over Gaussians.
    pub features: Vec<f64>,
    pub means: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
}

impl ModelGrads {
    pub fn zeros(num_params: usize, feature_dim: usize, n: usize) -> Self {
        ModelGrads {
            net: vec![0.0; num_params],
            feature_dim,
            features: vec![0.0; feature_dim * n],
            means: vec![Vec3::zeros(); n],
            log_scales: vec![Vec3::zeros(); n],
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        for (a, b) in self.net.iter_mut().zip(&other.net) {
            *a += b;
        }
        for (a, b) in self.features.iter_mut().zip(&other.features) {
            *a += b;
        }
        for (a, b) in self.means.iter_mut().zip(&other.means) {
            *a += b;
        }
        for (a, b) in self.log_scales.iter_mut().zip(&other.log_scales) {
            *a += b;
        }
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

#[derive(Default)]
pub struct BackScratch {
    field: BackwardScratch,
    dfeature: Vec<f64>,
    comp: Vec<CompositeSample>,
}

/// Backpropagates `dL/dpixel` through compositing, the field network and
/// the splash weights of one recorded ray.
pub fn backward_ray(
    view: &SceneView,
    record: &RayRecord,
    dpixel: [f64; 3],
    grads: &mut ModelGrads,
    scratch: &mut BackScratch,
) {
    scratch.comp.clear();
    scratch.comp.extend(record.samples.iter().map(|s| CompositeSample {
        sigma: s.sigma,
        color: s.color,
        delta: s.delta,
    }));
    let dsamples = composite_backward(&scratch.comp, view.render.background, dpixel);
    let dim = view.features.dim();
    scratch.dfeature.resize(dim, 0.0);
    for (s, (dsigma, dcolor)) in record.samples.iter().zip(dsamples) {
        let Some(cache) = &s.cache else { continue };
        if dsigma == 0.0 && dcolor == [0.0; 3] {
            continue;
        }
        view.net.backward_into(
            cache,
            dsigma,
            dcolor,
            &mut grads.net,
            &mut scratch.dfeature,
            &mut scratch.field,
        );
        for (&j, &w) in s.neighbors.iter().zip(&s.weights) {
            let row = view.features.row(j);
            let mut dw = 0.0;
            let gf = &mut grads.features[j * dim..(j + 1) * dim];
            for c in 0..dim {
                gf[c] += w * scratch.dfeature[c];
                dw += scratch.dfeature[c] * row[c];
            }
            let (wm, wl) = weight_gradients(&s.position, view.set.get(j), w);
            grads.means[j] += wm * dw;
            grads.log_scales[j] += wl * dw;
        }
    }
}

/// Pushes accumulated feature gradients through the hash grid at each
/// Gaussian mean (live features). Adds the grid's position term to
/// `grads.means` and returns the table gradient.
pub fn backward_features_to_grid(
    set: &GaussianSet,
    grid: &HashGrid,
    grads: &mut ModelGrads,
    accum: &mut crate::hashgrid::GridGradAccum,
) {
    for i in 0..set.len() {
        let row = &grads.features[i * grads.feature_dim..(i + 1) * grads.feature_dim];
        if row.iter().all(|v| *v == 0.0) {
            continue;
        }
        let gx = grid.backward_accumulate(&set.get(i).mean, row, accum);
        grads.means[i] += gx;
    }
}

/// A rendered image: linear RGB composited over the background plus the
/// accumulated alpha per pixel, rows top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<f64>,
    pub acc_alpha: Vec<f64>,
}

impl Image {
    pub fn filled(width: u32, height: u32, color: [f64; 3]) -> Self {
        let n = (width * height) as usize;
        Image {
            width,
            height,
            rgb: color.iter().copied().cycle().take(3 * n).collect(),
            acc_alpha: vec![0.0; n],
        }
    }

    pub fn pixel(&self, col: u32, row: u32) -> [f64; 3] {
        let i = 3 * (row * self.width + col) as usize;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn alpha_at(&self, col: u32, row: u32) -> f64 {
        self.acc_alpha[(row * self.width + col) as usize]
    }

    /// 8-bit RGBA, alpha opaque.
    pub fn to_rgba8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.rgb.len() / 3 * 4);
        for px in self.rgb.chunks_exact(3) {
            for v in px {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let enc = image::codecs::png::PngEncoder::new(&mut buf);
        image::ImageEncoder::write_image(
            enc,
            &self.to_rgba8(),
            self.width,
            self.height,
            image::ExtendedColorType::Rgba8,
        )
        .map_err(|e| GenieError::Dataset(format!("png encode: {e}")))?;
        Ok(buf)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| GenieError::io(path, e))
    }

    /// Raw dump: `width: u32`, `height: u32`, then `r, g, b, acc_alpha` as
    /// little-endian `f32` per pixel.
    pub fn raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.acc_alpha.len() * 16);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for (px, a) in self.rgb.chunks_exact(3).zip(&self.acc_alpha) {
            for v in px.iter().chain(std::iter::once(a)) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| GenieError::io(path, e))?;
        f.write_all(&self.raw_bytes()).map_err(|e| GenieError::io(path, e))
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.rgb.len(), other.rgb.len());
        self.rgb
            .iter()
            .zip(&other.rgb)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.rgb.len() as f64
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.rgb.len(), other.rgb.len());
        self.rgb
            .iter()
            .zip(&other.rgb)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / self.rgb.len() as f64
    }
}

pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

/// RNG for the samples of one pixel; independent of scheduling.
pub fn pixel_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Renders every pixel of `camera`. Rows run in parallel; each pixel draws
/// from its own RNG stream so the result does not depend on thread count.
pub fn render_image(
    camera: &Camera,
    set: &GaussianSet,
    index: Option<&ProximityIndex>,
    grid: &HashGrid,
    net: &FieldNetwork,
    splash: &SplashConfig,
    render: &RenderConfig,
) -> Result<Image> {
    camera.validate()?;
    if set.is_empty() {
        return Ok(Image::filled(camera.width, camera.height, render.background));
    }
    let features = FeatureTable::for_mode(set, grid, splash.mode)?;
    render_with_features(camera, set, index, &features, net, splash, render)
}

pub fn render_with_features(
    camera: &Camera,
    set: &GaussianSet,
    index: Option<&ProximityIndex>,
    features: &FeatureTable,
    net: &FieldNetwork,
    splash: &SplashConfig,
    render: &RenderConfig,
) -> Result<Image> {
    camera.validate()?;
    let view = SceneView {
        set,
        index,
        features,
        net,
        splash,
        render,
    };
    view.check()?;
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut rgb = vec![0.0; 3 * w * h];
    let mut acc = vec![0.0; w * h];
    rgb.par_chunks_mut(3 * w)
        .zip(acc.par_chunks_mut(w))
        .enumerate()
        .for_each_init(TraceScratch::default, |scratch, (row, (rgb_row, acc_row))| {
            for col in 0..w {
                let ray = camera.pixel_ray(col as u32, row as u32);
                let mut rng = pixel_rng(render.seed, (row * w + col) as u64);
                let (px, a) = trace_ray(&view, &ray, &mut rng, scratch, None);
                rgb_row[3 * col..3 * col + 3].copy_from_slice(&px);
                acc_row[col] = a;
            }
        });
    Ok(Image {
        width: camera.width,
        height: camera.height,
        rgb,
        acc_alpha: acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_uniform_samples() {
        let mut rng = pixel_rng(0, 0);
        let s = sample_ray(0.0, 1.0, 2, false, &mut rng);
        assert_eq!(s, vec![(0.0, 0.5), (0.5, 0.5)]);
    }

    #[test]
    fn stratified_sampling_is_reproducible_and_ordered() {
        let a = sample_ray(0.3, 2.0, 32, true, &mut pixel_rng(4, 9));
        let b = sample_ray(0.3, 2.0, 32, true, &mut pixel_rng(4, 9));
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(a.iter().all(|(t, d)| *t >= 0.3 && *t <= 2.0 && *d > 0.0));
        let c = sample_ray(0.3, 2.0, 32, true, &mut pixel_rng(5, 9));
        assert_ne!(a, c);
    }

    #[test]
    fn transparent_medium_shows_background() {
        let samples = vec![
            CompositeSample {
                sigma: 0.0,
                color: [0.2, 0.4, 0.6],
                delta: 0.1
            };
            10
        ];
        let (px, a) = composite(&samples, [1.0, 0.5, 0.25]);
        assert_eq!(px, [1.0, 0.5, 0.25]);
        assert_eq!(a, 0.0);
    }

    #[test]
    fn opaque_first_sample_wins() {
        let samples = vec![
            CompositeSample {
                sigma: f64::INFINITY,
                color: [0.2, 0.4, 0.6],
                delta: 0.1,
            },
            CompositeSample {
                sigma: 3.0,
                color: [1.0, 0.0, 0.0],
                delta: 0.1,
            },
        ];
        let (px, a) = composite(&samples, [1.0; 3]);
        assert_eq!(px, [0.2, 0.4, 0.6]);
        assert_eq!(a, 1.0);
    }

    #[test]
    fn uniform_medium_matches_beer_lambert() {
        let s = sample_ray(0.0, 1.0, 256, false, &mut pixel_rng(0, 0));
        let samples: Vec<_> = s
            .iter()
            .map(|&(_, d)| CompositeSample {
                sigma: 1.0,
                color: [0.0; 3],
                delta: d,
            })
            .collect();
        let (_, a) = composite(&samples, [1.0; 3]);
        assert!((a - (1.0 - (-1.0f64).exp())).abs() < 1e-3);
    }

    #[test]
    fn single_sample_color_gradient_is_weight() {
        let s = [CompositeSample {
            sigma: 2.0,
            color: [0.1, 0.2, 0.3],
            delta: 0.25,
        }];
        let g = composite_backward(&s, [1.0; 3], [1.0, 0.0, 0.0]);
        let a = alpha(2.0, 0.25);
        assert!((g[0].1[0] - a).abs() < 1e-15);
        assert_eq!(g[0].1[1], 0.0);
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let samples: Vec<_> = (0..6)
            .map(|i| CompositeSample {
                sigma: 0.5 + i as f64 * 0.7,
                color: [0.1 * i as f64, 0.5, 1.0 - 0.1 * i as f64],
                delta: 0.05 + 0.01 * i as f64,
            })
            .collect();
        let bg = [0.9, 0.8, 0.7];
        let dp = [0.3, -1.2, 0.8];
        let loss = |s: &[CompositeSample]| {
            let (p, _) = composite(s, bg);
            (0..3).map(|c| dp[c] * p[c]).sum::<f64>()
        };
        let g = composite_backward(&samples, bg, dp);
        let h = 1e-6;
        for i in 0..samples.len() {
            let mut a = samples.clone();
            let mut b = samples.clone();
            a[i].sigma += h;
            b[i].sigma -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - g[i].0).abs() < 1e-8, "{i}: {fd} vs {}", g[i].0);
        }
    }

    #[test]
    fn raw_dump_layout() {
        let img = Image::filled(2, 1, [0.5, 0.25, 1.0]);
        let raw = img.raw_bytes();
        assert_eq!(raw.len(), 8 + 2 * 16);
        assert_eq!(&raw[0..4], &2u32.to_le_bytes());
        assert_eq!(&raw[8..12], &0.5f32.to_le_bytes());
    }
}

//! Independent oracles and scene builders shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use genie_core::io::dataset::{Dataset, Frame};
use genie_core::{Activation, Camera, Gaussian, GaussianSet, HashGrid, HashGridConfig, Vec3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_point(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.random(), rng.random(), rng.random())
}

/// `n` anisotropic Gaussians in the unit cube. A few share a mean with an
/// earlier one so distance ties occur.
pub fn random_scene(n: usize, rng: &mut ChaCha8Rng) -> GaussianSet {
    let base = (1.0 / n as f64).cbrt();
    let mut gs: Vec<Gaussian> = Vec::with_capacity(n);
    for i in 0..n {
        let mean = if i > 0 && rng.random::<f64>() < 0.05 {
            gs[rng.random_range(0..i)].mean
        } else {
            unit_point(rng)
        };
        let ls = Vec3::from_fn(|_, _| 2.0 * (base * rng.random_range(0.3..1.5)).ln());
        gs.push(Gaussian::new(mean, ls, 0));
    }
    GaussianSet::new(gs)
}

/// Query probes: half near a random mean, half uniform over a padded cube.
pub fn probe(set: &GaussianSet, rng: &mut ChaCha8Rng) -> Vec3 {
    if rng.random::<bool>() {
        let g = set.get(rng.random_range(0..set.len()));
        let s = g.variance().map(f64::sqrt);
        g.mean + Vec3::from_fn(|a, _| s[a] * rng.random_range(-2.5..2.5))
    } else {
        Vec3::from_fn(|_, _| rng.random_range(-0.1..1.1))
    }
}

/// Squared Mahalanobis distance, written out independently.
pub fn maha_sq(g: &Gaussian, x: &Vec3) -> f64 {
    (0..3)
        .map(|a| {
            let d = x[a] - g.mean[a];
            d * d / g.log_scale[a].exp()
        })
        .sum()
}

/// Every Gaussian whose `q * sqrt(max variance)` sphere contains `x`,
/// ordered by Euclidean distance then index, truncated to `k`.
pub fn containing(set: &GaussianSet, x: &Vec3, k: usize, q: f64) -> (Vec<usize>, bool) {
    let mut hits: Vec<(f64, usize)> = set
        .gaussians()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let r = q * g.log_scale.max().exp().sqrt();
            let d = (x - g.mean).norm();
            (d <= r).then_some((d, i))
        })
        .collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let over = hits.len() > k;
    hits.truncate(k);
    (hits.into_iter().map(|(_, i)| i).collect(), over)
}

/// XOR-of-primes spatial hash, restated.
pub fn spatial_hash(v: [u32; 3], table_size: usize) -> usize {
    let h = v[0] ^ v[1].wrapping_mul(2_654_435_761) ^ v[2].wrapping_mul(805_459_861);
    h as usize % table_size
}

pub fn level_res(cfg: &HashGridConfig, level: usize) -> u32 {
    let mut s = cfg.base_resolution as f64;
    for _ in 0..level {
        s *= cfg.per_level_scale;
    }
    s.floor() as u32
}

pub fn vertex_row(cfg: &HashGridConfig, level: usize, v: [u32; 3]) -> usize {
    let side = level_res(cfg, level) as usize + 1;
    if side.pow(3) <= cfg.table_size {
        v[0] as usize + side * v[1] as usize + side * side * v[2] as usize
    } else {
        spatial_hash(v, cfg.table_size)
    }
}

/// Per-level trilinear interpolation over the grid's stored tables.
pub fn trilinear(grid: &HashGrid, x: &Vec3) -> Vec<f64> {
    let cfg = grid.config();
    let f = cfg.features_per_level;
    let mut out = Vec::with_capacity(cfg.levels * f);
    for level in 0..cfg.levels {
        let res = level_res(cfg, level);
        let mut base = [0u32; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let u = ((x[a] - cfg.bounds_min[a]) / (cfg.bounds_max[a] - cfg.bounds_min[a])).clamp(0.0, 1.0);
            let p = u * res as f64;
            let c = (p.floor() as u32).min(res - 1);
            base[a] = c;
            t[a] = p - c as f64;
        }
        let mut acc = vec![0.0; f];
        for dz in 0..2u32 {
            for dy in 0..2u32 {
                for dx in 0..2u32 {
                    let w = [dx, dy, dz]
                        .iter()
                        .enumerate()
                        .map(|(a, &d)| if d == 1 { t[a] } else { 1.0 - t[a] })
                        .product::<f64>();
                    let row = vertex_row(cfg, level, [base[0] + dx, base[1] + dy, base[2] + dz]);
                    for (o, v) in acc.iter_mut().zip(&grid.tables()[level][row * f..(row + 1) * f]) {
                        *o += w * v;
                    }
                }
            }
        }
        out.extend(acc);
    }
    out
}

/// Symmetric relative check: `|a - n| <= rtol * max(|a|, |n|) + atol`.
pub fn close(a: f64, n: f64, rtol: f64, atol: f64) -> bool {
    (a - n).abs() <= rtol * a.abs().max(n.abs()) + atol
}

/// Tiny dataset: `frames` cameras around the origin with random targets.
pub fn tiny_dataset(frames: usize, size: u32, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let frames = (0..frames)
        .map(|i| {
            let phi = i as f64 * 2.0;
            let eye = Vec3::new(0.6 * phi.cos(), 0.2, 0.6 * phi.sin());
            let mut camera = Camera::look_at(eye, Vec3::zeros(), Vec3::y(), size as f64 * 1.2, size, size);
            camera.near = 0.2;
            camera.far = 1.0;
            Frame {
                name: format!("f{i}"),
                camera,
                rgb: (0..3 * size * size).map(|_| r.random()).collect(),
            }
        })
        .collect();
    Dataset {
        width: size,
        height: size,
        background: [1.0; 3],
        frames,
        init_points: Vec::new(),
        aabb: None,
    }
}

/// Four fat isotropic Gaussians around the origin.
pub fn four_gaussians() -> GaussianSet {
    let pts = [
        Vec3::new(0.05, 0.02, -0.03),
        Vec3::new(-0.06, 0.04, 0.05),
        Vec3::new(0.01, -0.07, 0.02),
        Vec3::new(-0.02, 0.01, -0.08),
    ];
    GaussianSet::new(
        pts.iter()
            .enumerate()
            .map(|(i, p)| {
                let mut g = Gaussian::isotropic(*p, 0.004 + 0.001 * i as f64, 0);
                g.log_scale.y += 0.2 * i as f64;
                g
            })
            .collect(),
    )
}

/// One finite-difference comparison: what was perturbed, the analytic
/// derivative, and central differences at `h` and `h / 10`.
pub type FdCase = (String, f64, [f64; 2]);

pub fn central<F: FnMut(f64) -> f64>(h: f64, mut f: F) -> [f64; 2] {
    [h, h / 10.0].map(|s| (f(s) - f(-s)) / (2.0 * s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdVerdict {
    Pass,
    /// The two step sizes disagree (a ReLU or cell-face kink lies within
    /// `h`) and shrinking the step moves the estimate toward the analytic
    /// value, which then is one of the one-sided slopes.
    Kink,
    Fail,
}

pub fn fd_verdict(case: &FdCase, rtol: f64, atol: f64) -> FdVerdict {
    let (_, a, [n, fine]) = case;
    if close(*a, *n, rtol, atol) {
        FdVerdict::Pass
    } else if !close(*n, *fine, rtol, atol) && ((a - fine).abs() < (a - n).abs() || close(*a, *fine, rtol, atol)) {
        FdVerdict::Kink
    } else {
        FdVerdict::Fail
    }
}

/// Field network parameters and input feature against central differences
/// of `0.9 sigma + <up, color>`.
pub fn field_fd_cases(seed: u64, h: f64, probes: usize, act: Activation) -> Vec<FdCase> {
    use genie_core::{FieldConfig, FieldNetwork};
    let mut r = rng(seed);
    let cfg = FieldConfig { hidden_activation: act, ..Default::default() };
    let net = FieldNetwork::new(12, cfg, seed);
    let feat: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
    let dir = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), 0.5).normalize();
    let up = [0.7, -0.4, 0.25];
    let objective = |n: &FieldNetwork, f: &[f64]| {
        let (c, s) = n.forward(f, &dir).unwrap();
        0.9 * s + c.iter().zip(up).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut cache = Default::default();
    net.forward_cached(&feat, &net.encode_direction(&dir), &mut cache);
    let mut grad = vec![0.0; net.num_params()];
    let dfeat = net.backward(&cache, 0.9, up, &mut grad);
    let mut out = Vec::new();
    let mut probe_net = net.clone();
    for _ in 0..probes {
        let p = r.random_range(0..net.num_params());
        let fd = central(h, |d| {
            let orig = probe_net.params()[p];
            probe_net.params_mut()[p] = orig + d;
            let v = objective(&probe_net, &feat);
            probe_net.params_mut()[p] = orig;
            v
        });
        out.push((format!("theta[{p}]"), grad[p], fd));
    }
    for c in 0..feat.len() {
        let fd = central(h, |d| {
            let mut f = feat.clone();
            f[c] += d;
            objective(&net, &f)
        });
        out.push((format!("feature[{c}]"), dfeat[c], fd));
    }
    out
}

/// Splash encoding gradients with respect to neighbor means, log-scales
/// and the hash-grid rows they read, on `<up, encode_point(x)>`. Spheres
/// cover the whole scene and `k` exceeds its size, so neighbor sets cannot
/// change under a perturbation.
pub fn splash_fd_cases(seed: u64, h: f64) -> Vec<FdCase> {
    use genie_core::splash::{encode_point, encode_point_backward};
    use genie_core::{ProximityIndex, SplashConfig};
    let cfg = HashGridConfig {
        levels: 4,
        base_resolution: 4,
        per_level_scale: 2.0,
        table_size: 1 << 10,
        features_per_level: 2,
        bounds_min: [-0.5; 3],
        bounds_max: [1.5; 3],
    };
    let mut grid = HashGrid::new(cfg, seed).unwrap();
    let mut r = rng(seed);
    for t in grid.tables_mut() {
        for v in t.iter_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
    let set = random_scene(40, &mut r);
    let splash = SplashConfig { k: 64, q: 20.0, ..Default::default() };
    let objective = |set: &GaussianSet, grid: &HashGrid, x: &Vec3, up: &[f64]| {
        let index = ProximityIndex::build(set, splash.q).unwrap();
        let o = encode_point(x, set, &index, grid, &splash).unwrap();
        o.feature.iter().zip(up).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut out = Vec::new();
    for _ in 0..6 {
        let i = r.random_range(0..set.len());
        let g = set.get(i);
        let x = g.mean + g.variance().map(f64::sqrt).component_mul(&Vec3::new(0.4, -0.3, 0.5));
        let up: Vec<f64> = (0..grid.output_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let index = ProximityIndex::build(&set, splash.q).unwrap();
        let grad = encode_point_backward(&x, &set, &index, &grid, &splash, &up).unwrap();
        for ((j, gm), (_, gl)) in grad.means.iter().zip(&grad.log_scales) {
            for a in 0..3 {
                let fm = central(h, |d| {
                    let mut s = set.clone();
                    s.mutate(|gs| gs[*j].mean[a] += d);
                    objective(&s, &grid, &x, &up)
                });
                out.push((format!("mean[{j}][{a}]"), gm[a], fm));
                let fl = central(h, |d| {
                    let mut s = set.clone();
                    s.mutate(|gs| gs[*j].log_scale[a] += d);
                    objective(&s, &grid, &x, &up)
                });
                out.push((format!("logScale[{j}][{a}]"), gl[a], fl));
            }
        }
        let f = grad.grid.features_per_level;
        let mut rows = std::collections::BTreeMap::new();
        for (k, row) in grad.grid.rows.iter().enumerate() {
            for c in 0..f {
                *rows.entry((*row, c)).or_insert(0.0) += grad.grid.values[k * f + c];
            }
        }
        for (&((level, row), c), &a) in rows.iter().step_by(7).take(8) {
            let fd = central(h, |d| {
                let orig = grid.row(level as usize, row as usize)[c];
                grid.row_mut(level as usize, row as usize)[c] = orig + d;
                let v = objective(&set, &grid, &x, &up);
                grid.row_mut(level as usize, row as usize)[c] = orig;
                v
            });
            out.push((format!("phi[{level}][{row}][{c}]"), a, fd));
        }
    }
    out
}

/// Full render loss (MSE over every pixel of one 8x8 view of four
/// Gaussians) against central differences, for field parameters,
/// grid rows, means and log-scales. `Q` is large enough that every sample
/// lies inside every sphere; the loss jumps where a sample crosses a
/// sphere boundary.
pub fn pipeline_fd_cases(seed: u64, h: f64, act: Activation) -> Vec<FdCase> {
    use genie_core::hashgrid::GridGradAccum;
    use genie_core::render::backward_features_to_grid;
    use genie_core::{RunConfig, Trainer};
    let mut cfg = RunConfig::default();
    cfg.grid = HashGridConfig {
        levels: 4,
        base_resolution: 4,
        per_level_scale: 2.0,
        table_size: 1 << 10,
        features_per_level: 2,
        bounds_min: [-0.3137, -0.2951, -0.3062],
        bounds_max: [0.2911, 0.3043, 0.2987],
    };
    cfg.field.hidden = 16;
    cfg.field.hidden_activation = act;
    cfg.splash.k = 4;
    cfg.splash.q = 12.0;
    cfg.render.samples_per_ray = 24;
    cfg.render.clip_to_scene = false;
    cfg.train.stratified = false;
    cfg.train.seed = seed;
    let data = tiny_dataset(1, 8, seed);
    let rays: Vec<(usize, usize)> = (0..64).map(|p| (0, p)).collect();
    let mut t = Trainer::new(cfg, four_gaussians()).unwrap();
    let mut r = rng(seed ^ 7);
    for tab in t.grid.tables_mut() {
        for v in tab.iter_mut() {
            *v = r.random_range(-2.0..2.0);
        }
    }
    let (_, mut grads, _, _) = t.loss_and_grads(&data, &rays, 1).unwrap();
    let mut accum = GridGradAccum::new(t.grid.config().features_per_level);
    backward_features_to_grid(&t.set, &t.grid, &mut grads, &mut accum);
    let loss = |t: &mut Trainer| t.loss_and_grads(&data, &rays, 1).unwrap().0;
    let mut out = Vec::new();
    for _ in 0..12 {
        let p = r.random_range(0..t.net.num_params());
        let fd = central(h, |d| {
            let orig = t.net.params()[p];
            t.net.params_mut()[p] = orig + d;
            let v = loss(&mut t);
            t.net.params_mut()[p] = orig;
            v
        });
        out.push((format!("theta[{p}]"), grads.net[p], fd));
    }
    let rows: Vec<((u32, u32), Vec<f64>)> = accum.iter().map(|(k, v)| (k, v.to_vec())).collect();
    for ((level, row), g) in rows.iter().step_by(5).take(10) {
        let fd = central(h, |d| {
            let orig = t.grid.row(*level as usize, *row as usize)[0];
            t.grid.row_mut(*level as usize, *row as usize)[0] = orig + d;
            let v = loss(&mut t);
            t.grid.row_mut(*level as usize, *row as usize)[0] = orig;
            v
        });
        out.push((format!("phi[{level}][{row}]"), g[0], fd));
    }
    for i in 0..t.set.len() {
        for a in 0..3 {
            let fd = central(h, |d| {
                t.set.mutate(|gs| gs[i].mean[a] += d);
                let v = loss(&mut t);
                t.set.mutate(|gs| gs[i].mean[a] -= d);
                v
            });
            out.push((format!("mean[{i}][{a}]"), grads.means[i][a], fd));
            let fd = central(h, |d| {
                t.set.mutate(|gs| gs[i].log_scale[a] += d);
                let v = loss(&mut t);
                t.set.mutate(|gs| gs[i].log_scale[a] -= d);
                v
            });
            out.push((format!("logScale[{i}][{a}]"), grads.log_scales[i][a], fd));
        }
    }
    out
}

/// A cheap training setup around [`four_gaussians`] plus a few more
/// points, for determinism and ablation tests.
pub fn small_run(seed: u64) -> (genie_core::RunConfig, GaussianSet, Dataset) {
    let mut cfg = genie_core::RunConfig::toy();
    cfg.grid.levels = 6;
    cfg.grid.table_size = 1 << 12;
    cfg.field.hidden = 16;
    cfg.render.samples_per_ray = 16;
    cfg.train.rays_per_batch = 48;
    cfg.train.chunk_size = 8;
    cfg.train.seed = seed;
    cfg.train.set_steps(200);
    cfg.train.densify.interval_steps = 10;
    cfg.train.densify.start_step = 10;
    cfg.train.prune.interval_steps = 25;
    let mut r = rng(seed);
    let mut gs = four_gaussians().into_parts().0;
    for _ in 0..28 {
        let p = Vec3::from_fn(|_, _| r.random_range(-0.12..0.12));
        gs.push(Gaussian::isotropic(p, 0.002, 0));
    }
    (cfg, GaussianSet::new(gs), tiny_dataset(3, 8, seed))
}

/// Briefly trained and baked scene from [`small_run`].
pub fn baked_bundle(seed: u64, steps: u64) -> genie_core::SceneBundle {
    let (cfg, set, data) = small_run(seed);
    let mut t = genie_core::Trainer::new(cfg, set).unwrap();
    t.train_until(&data, steps, |_| {}).unwrap();
    t.bake().unwrap();
    t.to_bundle()
}

pub fn render_bundle(b: &genie_core::SceneBundle, cam: &Camera) -> genie_core::Image {
    let index = b.build_index().unwrap();
    b.render(cam, index.as_ref(), &b.render_splash(None), &b.config.render).unwrap()
}

pub fn shifted_camera(cam: &Camera, t: Vec3) -> Camera {
    let mut c = cam.clone();
    let p = c.position() + t;
    c.pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&p);
    c
}

/// `(translated MAE, round-trip MAE, selection-edit MAE)` for a baked
/// scene: translate everything and the camera by `t`; translate back;
/// translate a subset and back.
pub fn equivariance_errors(b: &genie_core::SceneBundle, cam: &Camera, t: Vec3) -> (f64, f64, f64) {
    use genie_core::edit::{apply_transform, translation, Selection};
    let reference = render_bundle(b, cam);
    let mut moved = b.clone();
    apply_transform(&mut moved.set, &Selection::All, &translation(t)).unwrap();
    let shifted = render_bundle(&moved, &shifted_camera(cam, t)).mean_abs_diff(&reference);
    apply_transform(&mut moved.set, &Selection::All, &translation(-t)).unwrap();
    let round = render_bundle(&moved, cam).mean_abs_diff(&reference);
    let sel = Selection::Indices((0..b.set.len()).step_by(3).collect());
    let mut part = b.clone();
    apply_transform(&mut part.set, &sel, &translation(t)).unwrap();
    apply_transform(&mut part.set, &sel, &translation(-t)).unwrap();
    let partial = render_bundle(&part, cam).mean_abs_diff(&reference);
    (shifted, round, partial)
}

/// Trainer on the procedural toy scene with the toy preset.
pub fn toy_trainer(spec: &genie_core::io::toy::ToySpec, seed: u64) -> (genie_core::Trainer, Dataset) {
    use genie_core::io::toy::{gaussians_from_points, generate_toy_scene};
    let toy = generate_toy_scene(spec, seed);
    let mut cfg = genie_core::RunConfig::toy();
    cfg.train.seed = seed;
    cfg.render.background = toy.dataset.background;
    let init = gaussians_from_points(&toy.dataset.init_points, cfg.train.densify.init_log_scale);
    (genie_core::Trainer::new(cfg, init).unwrap(), toy.dataset)
}

/// Mean squared error over every training view, rendered with the
/// scene's natural feature mode and deterministic samples.
pub fn train_view_mse(b: &genie_core::SceneBundle, data: &Dataset) -> f64 {
    let index = b.build_index().unwrap();
    let splash = b.render_splash(None);
    let render = genie_core::RenderConfig { stratified: false, ..b.config.render.clone() };
    let mut total = 0.0;
    for f in &data.frames {
        let img = b.render(&f.camera, index.as_ref(), &splash, &render).unwrap();
        total += img.rgb.iter().zip(&f.rgb).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    total / (data.frames.len() * data.frames[0].rgb.len()) as f64
}

/// Hash-grid table rows and query position against central differences
/// of `<up, encode(x)>`.
pub fn grid_fd_cases(seed: u64, h: f64, points: usize) -> Vec<FdCase> {
    let cfg = HashGridConfig {
        levels: 6,
        base_resolution: 5,
        per_level_scale: 1.7,
        table_size: 1 << 10,
        features_per_level: 3,
        bounds_min: [-0.3, -1.0, 0.2],
        bounds_max: [0.9, 0.5, 1.4],
    };
    let mut grid = HashGrid::new(cfg.clone(), seed).unwrap();
    let mut r = rng(seed);
    for t in grid.tables_mut() {
        t.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    }
    let mut out = Vec::new();
    for _ in 0..points {
        let x = Vec3::from_fn(|a, _| r.random_range(cfg.bounds_min[a]..cfg.bounds_max[a]));
        let up: Vec<f64> = (0..grid.output_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let objective = |g: &HashGrid, y: &Vec3| g.encode(y).unwrap().iter().zip(&up).map(|(p, q)| p * q).sum::<f64>();
        let (sg, gx) = grid.encode_backward(&x, &up);
        for a in 0..3 {
            let fd = central(h, |d| {
                let mut y = x;
                y[a] += d;
                objective(&grid, &y)
            });
            out.push((format!("x[{a}]"), gx[a], fd));
        }
        let f = sg.features_per_level;
        let mut rows = std::collections::BTreeMap::new();
        for (k, row) in sg.rows.iter().enumerate() {
            for c in 0..f {
                *rows.entry((*row, c)).or_insert(0.0) += sg.values[k * f + c];
            }
        }
        for (&((level, row), c), &a) in rows.iter().step_by(5) {
            let fd = central(h, |d| {
                let orig = grid.row(level as usize, row as usize)[c];
                grid.row_mut(level as usize, row as usize)[c] = orig + d;
                let v = objective(&grid, &x);
                grid.row_mut(level as usize, row as usize)[c] = orig;
                v
            });
            out.push((format!("phi[{level}][{row}][{c}]"), a, fd));
        }
    }
    out
}

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use genie_core::render::{render_image, RenderConfig};
use genie_core::rtgps::brute_force_query;
use genie_core::splash::bake_features;
use genie_core::{
    Camera, FeatureMode, FieldConfig, FieldNetwork, Gaussian, GaussianSet, HashGrid, HashGridConfig, ProximityIndex,
    RadiusMode, SplashConfig, Vec3,
};

use crate::args::BenchArgs;
use crate::CliResult;

pub const CSV_HEADER: &str = "n,k,Q,build_ms,query_us_p50,query_us_p99,brute_us_p50,render_rays_per_sec";

/// Brute-force timings are taken on at most this many queries.
const BRUTE_QUERIES: usize = 200;

/// Uniform means in the unit cube; the isotropic variance is chosen so a
/// `Q = 2` sphere holds about 20 means on average.
pub fn random_scene(n: usize, rng: &mut ChaCha8Rng) -> GaussianSet {
    let sigma = (15.0 / (std::f64::consts::PI * n as f64)).cbrt() / 2.0;
    GaussianSet::new(
        (0..n)
            .map(|_| Gaussian::isotropic(Vec3::new(rng.random(), rng.random(), rng.random()), sigma * sigma, 0))
            .collect(),
    )
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let i = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[i]
}

fn timed_us(mut f: impl FnMut()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e6
}

pub fn run(a: BenchArgs) -> CliResult {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let grid_cfg = HashGridConfig {
        levels: 8,
        table_size: 1 << 14,
        bounds_min: [0.0; 3],
        bounds_max: [1.0; 3],
        ..Default::default()
    };
    let grid = HashGrid::new(grid_cfg, a.seed)?;
    let net = FieldNetwork::new(grid.output_dim(), FieldConfig::default(), a.seed + 1);
    println!("{CSV_HEADER}");
    for &n in &a.n {
        let mut set = random_scene(n, &mut rng);
        bake_features(&mut set, &grid)?;
        let probes: Vec<Vec3> = (0..a.queries)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        for &q in &a.q {
            let t = Instant::now();
            let index = ProximityIndex::build(&set, q)?;
            let build_ms = t.elapsed().as_secs_f64() * 1e3;
            for &k in &a.k {
                let mut times: Vec<f64> = probes
                    .iter()
                    .map(|x| {
                        timed_us(|| {
                            std::hint::black_box(index.query(&set, x, k).expect("fresh index"));
                        })
                    })
                    .collect();
                times.sort_by(f64::total_cmp);
                let mut brute: Vec<f64> = probes
                    .iter()
                    .take(BRUTE_QUERIES)
                    .map(|x| {
                        timed_us(|| {
                            std::hint::black_box(brute_force_query(&set, x, k, q, RadiusMode::Sqrt));
                        })
                    })
                    .collect();
                brute.sort_by(f64::total_cmp);
                let rays = if a.render_size > 0 {
                    rays_per_sec(&set, &index, &grid, &net, k, q, a.render_size)?
                } else {
                    0.0
                };
                println!(
                    "{n},{k},{q},{build_ms:.3},{:.3},{:.3},{:.3},{rays:.1}",
                    percentile(&times, 0.5),
                    percentile(&times, 0.99),
                    percentile(&brute, 0.5),
                );
            }
        }
    }
    Ok(())
}

fn rays_per_sec(
    set: &GaussianSet,
    index: &ProximityIndex,
    grid: &HashGrid,
    net: &FieldNetwork,
    k: usize,
    q: f64,
    size: u32,
) -> genie_core::Result<f64> {
    let center = Vec3::repeat(0.5);
    let cam = Camera::look_at(center + Vec3::new(0.3, 0.4, 1.6), center, Vec3::y(), size as f64, size, size);
    let splash = SplashConfig {
        k,
        q,
        mode: FeatureMode::Baked,
        ..Default::default()
    };
    let render = RenderConfig {
        samples_per_ray: 32,
        ..Default::default()
    };
    let t = Instant::now();
    render_image(&cam, set, Some(index), grid, net, &splash, &render)?;
    Ok((size * size) as f64 / t.elapsed().as_secs_f64())
}

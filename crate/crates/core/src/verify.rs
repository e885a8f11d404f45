//! Self-checks run against a loaded scene: proximity search against the
//! brute-force scan, the drop-error bound, and finite-difference spot
//! checks of the analytic gradients.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::field::FieldNetwork;
use crate::hashgrid::HashGrid;
use crate::rtgps::{brute_force_query, effective_radius, ProximityIndex};
use crate::scene::{GaussianSet, Vec3};
use crate::splash::{mahalanobis_weight, verify_drop_bound, weight_gradients, FeatureTable, SplashConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag}  {:<24} {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub queries: usize,
    pub drop_trials: usize,
    pub epsilons: Vec<f64>,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            queries: 200,
            drop_trials: 300,
            epsilons: vec![1e-1, 1e-2, 1e-3],
            seed: 0,
        }
    }
}

/// `|a - n| <= rtol * max(|a|, |n|) + atol`.
pub fn fd_close(analytic: f64, numeric: f64, rtol: f64, atol: f64) -> bool {
    (analytic - numeric).abs() <= rtol * analytic.abs().max(numeric.abs()) + atol
}

/// A point near a random Gaussian, within a couple of radii.
fn probe(set: &GaussianSet, index: &ProximityIndex, rng: &mut ChaCha8Rng) -> Vec3 {
    let i = rng.random_range(0..set.len());
    let r = index.radii()[i];
    let d = Vec3::new(rng.random(), rng.random(), rng.random()).add_scalar(-0.5) * (2.0 * r);
    set.get(i).mean + d
}

/// Index answers equal the brute-force scan, every returned sphere
/// (with radii recomputed from the covariances) contains the query, and
/// the stored radius table matches the covariances.
pub fn check_proximity(set: &GaussianSet, index: &ProximityIndex, opts: &VerifyOptions) -> CheckResult {
    let name = "rtgps-oracle".to_string();
    if set.is_empty() {
        return CheckResult { name, passed: true, detail: "empty scene".into() };
    }
    let q = index.q();
    let mode = index.radius_mode();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checked = 0;
    for (i, r) in index.radii().iter().enumerate() {
        let expect = effective_radius(set.get(i), q, mode);
        if *r != expect {
            return CheckResult {
                name,
                passed: false,
                detail: format!("radius table entry {i} is {r}, covariance gives {expect}"),
            };
        }
    }
    for _ in 0..opts.queries {
        let x = probe(set, index, &mut rng);
        for k in [1, 4, 16] {
            let got = match index.query(set, &x, k) {
                Ok(r) => r,
                Err(e) => return CheckResult { name, passed: false, detail: e.to_string() },
            };
            let want = brute_force_query(set, &x, k, q, mode);
            if got != want {
                return CheckResult {
                    name,
                    passed: false,
                    detail: format!("query at {:?} k={k}: index {:?} vs scan {:?}", x.as_slice(), got.indices, want.indices),
                };
            }
            checked += 1;
        }
    }
    CheckResult {
        name,
        passed: true,
        detail: format!("{checked} queries match"),
    }
}

/// Randomized drop-bound trials: at a probe point, drop every Gaussian
/// past a distance cutoff chosen so the precondition holds, then require
/// each coordinate's deviation to stay below epsilon.
pub fn check_drop_bound(set: &GaussianSet, index: &ProximityIndex, features: &FeatureTable, opts: &VerifyOptions) -> CheckResult {
    let name = "drop-bound".to_string();
    if set.is_empty() {
        return CheckResult { name, passed: true, detail: "empty scene".into() };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xd0);
    let mut trials = 0;
    for &eps in &opts.epsilons {
        for _ in 0..opts.drop_trials {
            let x = probe(set, index, &mut rng);
            let mut by_dist: Vec<(f64, usize)> = (0..set.len())
                .map(|i| (set.get(i).mahalanobis_sq(&x).sqrt(), i))
                .collect();
            by_dist.sort_by(|a, b| b.0.total_cmp(&a.0));
            // grow the far set while the precondition still holds
            let mut drop: Vec<usize> = Vec::new();
            let mut best = None;
            for &(_, i) in &by_dist {
                drop.push(i);
                match verify_drop_bound(&x, set, features, &drop, eps) {
                    Ok(r) if r.holds => best = Some((drop.clone(), r)),
                    Ok(_) => break,
                    Err(e) => return CheckResult { name, passed: false, detail: e.to_string() },
                }
                if drop.len() >= 64 {
                    break;
                }
            }
            let Some((m, r)) = best else { continue };
            trials += 1;
            if let Some((c, d)) = r.deviation.iter().enumerate().find(|(_, d)| **d >= eps) {
                return CheckResult {
                    name,
                    passed: false,
                    detail: format!("eps={eps}: coordinate {c} deviates by {d} dropping {} gaussians", m.len()),
                };
            }
        }
    }
    CheckResult {
        name,
        passed: true,
        detail: format!("{trials} trials within epsilon"),
    }
}

/// Finite-difference spot checks of the field network and of the splash
/// weight gradients at probe points.
pub fn check_gradients(
    set: &GaussianSet,
    index: &ProximityIndex,
    features: &FeatureTable,
    net: &FieldNetwork,
    grid: &HashGrid,
    splash: &SplashConfig,
    opts: &VerifyOptions,
) -> CheckResult {
    let name = "gradients".to_string();
    let fail = |detail: String| CheckResult { name: name.clone(), passed: false, detail };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9d);
    let (rtol, atol) = (1e-3, 1e-9);
    let h = 1e-5;

    // field network at a random unit-scale feature
    let feat: Vec<f64> = (0..net.feature_dim()).map(|_| rng.random::<f64>() - 0.5).collect();
    let dir = Vec3::new(0.3, -0.5, 0.8).normalize();
    let up = [0.7, -0.2, 0.4];
    let objective = |n: &FieldNetwork| -> f64 {
        let (c, s) = n.forward(&feat, &dir).expect("dimensions match");
        0.9 * s + c.iter().zip(up).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut cache = Default::default();
    let enc = net.encode_direction(&dir);
    net.forward_cached(&feat, &enc, &mut cache);
    let mut grad = vec![0.0; net.num_params()];
    net.backward(&cache, 0.9, up, &mut grad);
    let mut probe_net = net.clone();
    for _ in 0..16 {
        let p = rng.random_range(0..net.num_params());
        let orig = probe_net.params()[p];
        probe_net.params_mut()[p] = orig + h;
        let fp = objective(&probe_net);
        probe_net.params_mut()[p] = orig - h;
        let fm = objective(&probe_net);
        probe_net.params_mut()[p] = orig;
        let fd = (fp - fm) / (2.0 * h);
        if !fd_close(grad[p], fd, rtol, atol) {
            return fail(format!("field parameter {p}: analytic {} vs numeric {fd}", grad[p]));
        }
    }

    // splash weights with respect to the neighbors' means and log-scales
    let mut checked = 0;
    for _ in 0..16 {
        if set.is_empty() {
            break;
        }
        let x = probe(set, index, &mut rng);
        let Ok(nb) = index.query(set, &x, splash.k) else { break };
        let upstream: Vec<f64> = (0..features.dim()).map(|_| rng.random::<f64>() - 0.5).collect();
        for &i in &nb.indices {
            let g = set.get(i);
            let f: f64 = features.row(i).iter().zip(&upstream).map(|(a, b)| a * b).sum();
            let w = mahalanobis_weight(&x, g);
            let (dm, dl) = weight_gradients(&x, g, w);
            for a in 0..3 {
                for (which, analytic) in [("mean", dm[a] * f), ("logScale", dl[a] * f)] {
                    let eval = |delta: f64| {
                        let mut gg = g.clone();
                        if which == "mean" {
                            gg.mean[a] += delta;
                        } else {
                            gg.log_scale[a] += delta;
                        }
                        mahalanobis_weight(&x, &gg) * f
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    if !fd_close(analytic, fd, rtol, atol) {
                        return fail(format!("gaussian {i} {which}[{a}]: analytic {analytic} vs numeric {fd}"));
                    }
                    checked += 1;
                }
            }
        }
    }

    // hash grid position gradient at a few means
    for _ in 0..8 {
        if set.is_empty() {
            break;
        }
        let i = rng.random_range(0..set.len());
        let x = set.get(i).mean;
        let upstream: Vec<f64> = (0..grid.output_dim()).map(|_| rng.random::<f64>() - 0.5).collect();
        let (_, gx) = grid.encode_backward(&x, &upstream);
        for a in 0..3 {
            let eval = |d: f64| {
                let mut y = x;
                y[a] += d;
                grid.encode(&y)
                    .map(|v| v.iter().zip(&upstream).map(|(p, q)| p * q).sum::<f64>())
                    .unwrap_or(f64::NAN)
            };
            // a step can cross a cell face where the derivative jumps
            let hg = 1e-7;
            let fd = (eval(hg) - eval(-hg)) / (2.0 * hg);
            if !fd_close(gx[a], fd, 1e-3, 1e-6) {
                let left = (eval(0.0) - eval(-hg)) / hg;
                let right = (eval(hg) - eval(0.0)) / hg;
                if !(fd_close(gx[a], left, 1e-3, 1e-6) || fd_close(gx[a], right, 1e-3, 1e-6)) {
                    return fail(format!("grid position gradient at gaussian {i} axis {a}: {} vs {fd}", gx[a]));
                }
            }
            checked += 1;
        }
    }
    CheckResult {
        name,
        passed: true,
        detail: format!("16 field parameters and {checked} scene derivatives agree"),
    }
}

/// Runs every suite against one scene snapshot.
pub fn run_all(
    set: &GaussianSet,
    index: &ProximityIndex,
    grid: &HashGrid,
    net: &FieldNetwork,
    splash: &SplashConfig,
    opts: &VerifyOptions,
) -> Result<Vec<CheckResult>> {
    let features = FeatureTable::for_mode(set, grid, splash.mode)?;
    Ok(vec![
        check_proximity(set, index, opts),
        check_drop_bound(set, index, &features, opts),
        check_gradients(set, index, &features, net, grid, splash, opts),
    ])
}

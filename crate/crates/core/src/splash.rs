//! Splash grid encoding: the feature at a query point is the sum of its
//! neighbors' features weighted by `exp(-d_M^2 / 2)`.
//!
//! Weights are deliberately left unnormalized; the drop-error bound in
//! [`verify_drop_bound`] is stated for the plain weighted sum, and a query
//! outside every confidence sphere encodes to zero and is flagged empty.

use serde::{Deserialize, Serialize};

use crate::error::{GenieError, Result};
use crate::hashgrid::{HashGrid, SparseGridGrad};
use crate::rtgps::{NeighborResult, ProximityIndex, RadiusMode};
use crate::scene::{Gaussian, GaussianSet, Vec3};

/// Where neighbor features come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Sample the hash grid at each neighbor's mean.
    #[default]
    Live,
    /// Read the feature frozen on the Gaussian.
    Baked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplashConfig {
    pub k: usize,
    pub q: f64,
    pub mode: FeatureMode,
    pub radius_mode: RadiusMode,
}

impl Default for SplashConfig {
    fn default() -> Self {
        SplashConfig {
            k: 16,
            q: 2.0,
            mode: FeatureMode::Live,
            radius_mode: RadiusMode::Sqrt,
        }
    }
}

impl SplashConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(GenieError::InvalidConfig("splash: k must be >= 1".into()));
        }
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(GenieError::InvalidConfig(format!("splash: Q must be positive, got {}", self.q)));
        }
        Ok(())
    }

    pub fn build_index(&self, set: &GaussianSet) -> Result<ProximityIndex> {
        ProximityIndex::build_with_mode(set, self.q, self.radius_mode)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplashOutput {
    pub feature: Vec<f64>,
    pub neighbors: NeighborResult,
    pub weights: Vec<f64>,
    /// No confidence sphere contained the query.
    pub empty: bool,
}

#[inline]
pub fn mahalanobis_weight(x: &Vec3, g: &Gaussian) -> f64 {
    (-0.5 * g.mahalanobis_sq(x)).exp()
}

/// Partial derivatives of [`mahalanobis_weight`] with respect to the mean
/// and to the log-variances, given the weight value `w`.
#[inline]
pub fn weight_gradients(x: &Vec3, g: &Gaussian, w: f64) -> (Vec3, Vec3) {
    let d = x - g.mean;
    let inv = g.inv_variance();
    let mut dmean = Vec3::zeros();
    let mut dlog = Vec3::zeros();
    for a in 0..3 {
        let s = d[a] * inv[a];
        dmean[a] = w * s;
        dlog[a] = 0.5 * w * d[a] * s;
    }
    (dmean, dlog)
}

/// Per-Gaussian features for one snapshot, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    values: Vec<f64>,
}

impl FeatureTable {
    pub fn live(set: &GaussianSet, grid: &HashGrid) -> Result<Self> {
        let dim = grid.output_dim();
        let mut values = vec![0.0; dim * set.len()];
        for (g, row) in set.gaussians().iter().zip(values.chunks_exact_mut(dim)) {
            grid.encode_into(&g.mean, row)?;
        }
        Ok(FeatureTable { dim, values })
    }

    pub fn baked(set: &GaussianSet, dim: usize) -> Result<Self> {
        let mut values = Vec::with_capacity(dim * set.len());
        for g in set.gaussians() {
            if g.feature.len() != dim {
                return Err(GenieError::DimensionMismatch {
                    what: "baked feature",
                    expected: dim,
                    got: g.feature.len(),
                });
            }
            values.extend_from_slice(&g.feature);
        }
        Ok(FeatureTable { dim, values })
    }

    pub fn for_mode(set: &GaussianSet, grid: &HashGrid, mode: FeatureMode) -> Result<Self> {
        match mode {
            FeatureMode::Live => Self::live(set, grid),
            FeatureMode::Baked => Self::baked(set, grid.output_dim()),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Reusable buffers for [`encode_with_table`].
#[derive(Default)]
pub struct SplashScratch {
    candidates: Vec<(f64, u32)>,
}

/// Encodes `x` against a prebuilt feature table. The index must be fresh.
pub fn encode_with_table(
    x: &Vec3,
    set: &GaussianSet,
    index: &ProximityIndex,
    table: &FeatureTable,
    k: usize,
    scratch: &mut SplashScratch,
    out: &mut SplashOutput,
) {
    index.query_unchecked(set, x, k, &mut scratch.candidates, &mut out.neighbors);
    out.feature.clear();
    out.feature.resize(table.dim(), 0.0);
    out.weights.clear();
    out.empty = out.neighbors.is_empty();
    for &i in &out.neighbors.indices {
        let w = mahalanobis_weight(x, set.get(i));
        out.weights.push(w);
        for (o, v) in out.feature.iter_mut().zip(table.row(i)) {
            *o += w * v;
        }
    }
}

/// Splash feature at `x`: neighbors from the proximity index, features from
/// the hash grid (live) or the Gaussians (baked).
pub fn encode_point(
    x: &Vec3,
    set: &GaussianSet,
    index: &ProximityIndex,
    grid: &HashGrid,
    config: &SplashConfig,
) -> Result<SplashOutput> {
    let neighbors = index.query(set, x, config.k)?;
    let dim = grid.output_dim();
    let mut feature = vec![0.0; dim];
    let mut weights = Vec::with_capacity(neighbors.len());
    let mut buf = vec![0.0; dim];
    for &i in &neighbors.indices {
        let g = set.get(i);
        let w = mahalanobis_weight(x, g);
        weights.push(w);
        let v: &[f64] = match config.mode {
            FeatureMode::Live => {
                grid.encode_into(&g.mean, &mut buf)?;
                &buf
            }
            FeatureMode::Baked => {
                if g.feature.len() != dim {
                    return Err(GenieError::DimensionMismatch {
                        what: "baked feature",
                        expected: dim,
                        got: g.feature.len(),
                    });
                }
                &g.feature
            }
        };
        for (o, f) in feature.iter_mut().zip(v) {
            *o += w * f;
        }
    }
    Ok(SplashOutput {
        feature,
        empty: neighbors.is_empty(),
        neighbors,
        weights,
    })
}

/// Gradients of `<upstream, encode_point(x)>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplashGrad {
    pub grid: SparseGridGrad,
    pub means: Vec<(usize, Vec3)>,
    pub log_scales: Vec<(usize, Vec3)>,
}

pub fn encode_point_backward(
    x: &Vec3,
    set: &GaussianSet,
    index: &ProximityIndex,
    grid: &HashGrid,
    config: &SplashConfig,
    upstream: &[f64],
) -> Result<SplashGrad> {
    if config.mode == FeatureMode::Baked {
        return Err(GenieError::BakedMode);
    }
    let dim = grid.output_dim();
    if upstream.len() != dim {
        return Err(GenieError::DimensionMismatch {
            what: "splash upstream gradient",
            expected: dim,
            got: upstream.len(),
        });
    }
    let neighbors = index.query(set, x, config.k)?;
    let mut out = SplashGrad {
        grid: SparseGridGrad {
            features_per_level: grid.config().features_per_level,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut scaled = vec![0.0; dim];
    for &i in &neighbors.indices {
        let g = set.get(i);
        let w = mahalanobis_weight(x, g);
        let h = grid.encode(&g.mean)?;
        let dw: f64 = upstream.iter().zip(&h).map(|(u, v)| u * v).sum();
        let (wm, wl) = weight_gradients(x, g, w);
        for (s, u) in scaled.iter_mut().zip(upstream) {
            *s = w * u;
        }
        let (gg, gx) = grid.encode_backward(&g.mean, &scaled);
        out.grid.rows.extend(gg.rows);
        out.grid.values.extend(gg.values);
        out.means.push((i, wm * dw + gx));
        out.log_scales.push((i, wl * dw));
    }
    Ok(out)
}

/// Freezes `grid.encode(mean)` onto every Gaussian.
pub fn bake_features(set: &mut GaussianSet, grid: &HashGrid) -> Result<()> {
    let table = FeatureTable::live(set, grid)?;
    set.mutate(|gs| {
        for (i, g) in gs.iter_mut().enumerate() {
            g.feature.clear();
            g.feature.extend_from_slice(table.row(i));
            g.baked = true;
        }
    });
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropBoundReport {
    pub holds: bool,
    /// Largest per-coordinate distance threshold.
    pub threshold: f64,
    /// `|full sum - sum without the dropped set|`, per coordinate.
    pub deviation: Vec<f64>,
}

/// Checks the drop-error bound at `x`: if every dropped Gaussian has
/// Mahalanobis distance above `sqrt(-2 ln(eps / S))`, where `S` is the
/// coordinate's sum of absolute dropped features, then removing them
/// changes that coordinate of the weighted sum by less than `eps`.
///
/// A coordinate with `S = 0` is trivially satisfied. When `S <= eps` the
/// threshold is taken as zero.
pub fn verify_drop_bound(
    x: &Vec3,
    set: &GaussianSet,
    features: &FeatureTable,
    drop: &[usize],
    epsilon: f64,
) -> Result<DropBoundReport> {
    if !(epsilon > 0.0) {
        return Err(GenieError::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    let dim = features.dim();
    let mut dropped = vec![false; set.len()];
    for &i in drop {
        if i >= set.len() {
            return Err(GenieError::InvalidSelection { index: i, len: set.len() });
        }
        if !features.row(i).iter().all(|v| v.is_finite()) {
            return Err(GenieError::NonFinite("dropped gaussian feature"));
        }
        dropped[i] = true;
    }

    let mut s = vec![0.0; dim];
    for (i, _) in dropped.iter().enumerate().filter(|(_, d)| **d) {
        for (acc, v) in s.iter_mut().zip(features.row(i)) {
            *acc += v.abs();
        }
    }
    let threshold = s
        .iter()
        .filter(|&&sc| sc > 0.0)
        .map(|&sc| (-2.0 * (epsilon / sc).ln()).max(0.0).sqrt())
        .fold(0.0, f64::max);
    let any_mass = s.iter().any(|&sc| sc > 0.0);
    let holds = !any_mass
        || dropped
            .iter()
            .enumerate()
            .filter(|(_, d)| **d)
            .all(|(i, _)| set.get(i).mahalanobis_sq(x).sqrt() > threshold);

    let mut full = vec![0.0; dim];
    let mut kept = vec![0.0; dim];
    for (i, g) in set.gaussians().iter().enumerate() {
        let w = mahalanobis_weight(x, g);
        for (c, v) in features.row(i).iter().enumerate() {
            full[c] += w * v;
            if !dropped[i] {
                kept[c] += w * v;
            }
        }
    }
    let deviation = full.iter().zip(&kept).map(|(a, b)| (a - b).abs()).collect();
    Ok(DropBoundReport {
        holds,
        threshold,
        deviation,
    })
}

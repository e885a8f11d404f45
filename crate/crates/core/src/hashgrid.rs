//! Multi-resolution hash-grid encoding.
//!
//! Each level holds a table of `features_per_level`-wide rows. Coarse levels
//! whose vertex lattice fits into the table are indexed densely; finer
//! levels use the XOR-of-primes spatial hash. A query is normalized into the
//! grid bounds (clamped at the boundary), trilinearly interpolated on every
//! level and the per-level results are concatenated.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GenieError, Result};
use crate::scene::Vec3;

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: u32,
    pub per_level_scale: f64,
    /// Rows per hashed level; must be a power of two.
    pub table_size: usize,
    pub features_per_level: usize,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 16,
            base_resolution: 16,
            per_level_scale: 1.5,
            table_size: 1 << 19,
            features_per_level: 2,
            bounds_min: [-1.5; 3],
            bounds_max: [1.5; 3],
        }
    }
}

impl HashGridConfig {
    /// Total encoded width, `levels * features_per_level`.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn resolution(&self, level: usize) -> u32 {
        (self.base_resolution as f64 * self.per_level_scale.powi(level as i32)).floor() as u32
    }

    /// Whether the level's `(res + 1)^3` vertex lattice is indexed densely.
    pub fn is_dense(&self, level: usize) -> bool {
        let side = self.resolution(level) as u128 + 1;
        side * side * side <= self.table_size as u128
    }

    pub fn rows(&self, level: usize) -> usize {
        if self.is_dense(level) {
            let side = self.resolution(level) as usize + 1;
            side * side * side
        } else {
            self.table_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GenieError::InvalidConfig(format!("hash grid: {m}")));
        if self.levels == 0 {
            return fail("levels must be >= 1".into());
        }
        if self.features_per_level == 0 {
            return fail("features_per_level must be >= 1".into());
        }
        if !self.table_size.is_power_of_two() || self.table_size > 1 << 31 {
            return fail(format!("table_size {} is not a power of two <= 2^31", self.table_size));
        }
        if self.base_resolution == 0 {
            return fail("base_resolution must be >= 1".into());
        }
        if !(self.per_level_scale > 1.0) && self.levels > 1 {
            return fail(format!("per_level_scale {} must exceed 1", self.per_level_scale));
        }
        for l in 1..self.levels {
            if self.resolution(l) <= self.resolution(l - 1) {
                return fail(format!("resolution does not increase at level {l}"));
            }
        }
        for a in 0..3 {
            if !(self.bounds_min[a] < self.bounds_max[a]) {
                return fail(format!("bounds_min must be < bounds_max on axis {a}"));
            }
        }
        Ok(())
    }
}

/// Table index of a lattice vertex on `level`.
pub fn hash_index(cell: [u32; 3], level: usize, config: &HashGridConfig) -> usize {
    if config.is_dense(level) {
        let side = config.resolution(level) as usize + 1;
        cell[0] as usize + side * (cell[1] as usize + side * cell[2] as usize)
    } else {
        let h = (cell[0].wrapping_mul(PRIMES[0]))
            ^ (cell[1].wrapping_mul(PRIMES[1]))
            ^ (cell[2].wrapping_mul(PRIMES[2]));
        h as usize & (config.table_size - 1)
    }
}

/// One trilinear corner contribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corner {
    pub level: u32,
    pub row: u32,
    pub weight: f64,
}

/// Sparse parameter gradient: one row of `features_per_level` values per
/// entry. Rows may repeat; consumers accumulate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseGridGrad {
    pub features_per_level: usize,
    pub rows: Vec<(u32, u32)>,
    pub values: Vec<f64>,
}

impl SparseGridGrad {
    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.features_per_level;
        &self.values[i * f..(i + 1) * f]
    }

    /// Sums duplicate rows; ordered by `(level, row)`.
    pub fn coalesced(&self) -> Vec<((u32, u32), Vec<f64>)> {
        let mut map: std::collections::BTreeMap<(u32, u32), Vec<f64>> = Default::default();
        for (i, key) in self.rows.iter().enumerate() {
            let e = map
                .entry(*key)
                .or_insert_with(|| vec![0.0; self.features_per_level]);
            for (a, b) in e.iter_mut().zip(self.row(i)) {
                *a += b;
            }
        }
        map.into_iter().collect()
    }
}

/// Accumulates row gradients across many backward calls.
#[derive(Clone, Debug, Default)]
pub struct GridGradAccum {
    features_per_level: usize,
    slots: HashMap<(u32, u32), usize>,
    keys: Vec<(u32, u32)>,
    values: Vec<f64>,
}

impl GridGradAccum {
    pub fn new(features_per_level: usize) -> Self {
        GridGradAccum {
            features_per_level,
            ..Default::default()
        }
    }

    pub fn clear(&mut self) {
        self.slots.clear();
        self.keys.clear();
        self.values.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn add(&mut self, level: u32, row: u32, scale: f64, upstream: &[f64]) {
        let f = self.features_per_level;
        let slot = *self.slots.entry((level, row)).or_insert_with(|| {
            self.keys.push((level, row));
            self.values.extend(std::iter::repeat_n(0.0, f));
            self.keys.len() - 1
        });
        for (v, u) in self.values[slot * f..(slot + 1) * f].iter_mut().zip(upstream) {
            *v += scale * u;
        }
    }

    /// Rows in first-touch order.
    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32), &[f64])> {
        let f = self.features_per_level;
        self.keys
            .iter()
            .enumerate()
            .map(move |(i, k)| (*k, &self.values[i * f..(i + 1) * f]))
    }

    pub fn get(&self, level: u32, row: u32) -> Option<&[f64]> {
        let f = self.features_per_level;
        self.slots
            .get(&(level, row))
            .map(|&s| &self.values[s * f..(s + 1) * f])
    }
}

/// Trainable multi-level feature tables.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    config: HashGridConfig,
    tables: Vec<Vec<f64>>,
}

struct LevelSample {
    cell: [u32; 3],
    frac: [f64; 3],
    /// Per-axis `d(frac)/dx`, zero where the query was clamped.
    dfrac: [f64; 3],
}

impl HashGrid {
    /// Parameters drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn new(config: HashGridConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.features_per_level;
        let tables = (0..config.levels)
            .map(|l| {
                (0..config.rows(l) * f)
                    .map(|_| rng.random_range(-1e-4..=1e-4))
                    .collect()
            })
            .collect();
        Ok(HashGrid { config, tables })
    }

    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let f = config.features_per_level;
        let tables = (0..config.levels)
            .map(|l| vec![0.0; config.rows(l) * f])
            .collect();
        Ok(HashGrid { config, tables })
    }

    pub fn from_tables(config: HashGridConfig, tables: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        if tables.len() != config.levels {
            return Err(GenieError::DimensionMismatch {
                what: "hash grid levels",
                expected: config.levels,
                got: tables.len(),
            });
        }
        for (l, t) in tables.iter().enumerate() {
            let expected = config.rows(l) * config.features_per_level;
            if t.len() != expected {
                return Err(GenieError::DimensionMismatch {
                    what: "hash grid table",
                    expected,
                    got: t.len(),
                });
            }
        }
        Ok(HashGrid { config, tables })
    }

    #[inline]
    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tables
    }

    pub fn row(&self, level: usize, row: usize) -> &[f64] {
        let f = self.config.features_per_level;
        &self.tables[level][row * f..(row + 1) * f]
    }

    pub fn row_mut(&mut self, level: usize, row: usize) -> &mut [f64] {
        let f = self.config.features_per_level;
        &mut self.tables[level][row * f..(row + 1) * f]
    }

    fn sample_level(&self, x: &Vec3, level: usize) -> LevelSample {
        let res = self.config.resolution(level);
        let mut cell = [0u32; 3];
        let mut frac = [0.0; 3];
        let mut dfrac = [0.0; 3];
        for a in 0..3 {
            let lo = self.config.bounds_min[a];
            let extent = self.config.bounds_max[a] - lo;
            let u = (x[a] - lo) / extent;
            let inside = (0.0..=1.0).contains(&u);
            let p = u.clamp(0.0, 1.0) * res as f64;
            let c = (p.floor() as u32).min(res - 1);
            cell[a] = c;
            frac[a] = p - c as f64;
            dfrac[a] = if inside { res as f64 / extent } else { 0.0 };
        }
        LevelSample { cell, frac, dfrac }
    }

    /// Visits the 8 corners of every level: `(level, row, weight, d weight / dx)`.
    #[inline]
    fn for_each_corner(&self, x: &Vec3, mut visit: impl FnMut(usize, usize, f64, [f64; 3])) {
        for level in 0..self.config.levels {
            let s = self.sample_level(x, level);
            for corner in 0..8u32 {
                let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                let mut w = [0.0; 3];
                let mut dw = [0.0; 3];
                for a in 0..3 {
                    if bits[a] == 1 {
                        w[a] = s.frac[a];
                        dw[a] = 1.0;
                    } else {
                        w[a] = 1.0 - s.frac[a];
                        dw[a] = -1.0;
                    }
                }
                let weight = w[0] * w[1] * w[2];
                let dweight = [
                    dw[0] * w[1] * w[2] * s.dfrac[0],
                    w[0] * dw[1] * w[2] * s.dfrac[1],
                    w[0] * w[1] * dw[2] * s.dfrac[2],
                ];
                let vertex = [s.cell[0] + bits[0], s.cell[1] + bits[1], s.cell[2] + bits[2]];
                let row = hash_index(vertex, level, &self.config);
                visit(level, row, weight, dweight);
            }
        }
    }

    /// Concatenated per-level trilinear features at `x`.
    pub fn encode(&self, x: &Vec3) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(x, &mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, x: &Vec3, out: &mut [f64]) -> Result<()> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(GenieError::NonFinite("hash grid query"));
        }
        let f = self.config.features_per_level;
        out.fill(0.0);
        self.for_each_corner(x, |level, row, weight, _| {
            let src = &self.tables[level][row * f..(row + 1) * f];
            for (o, v) in out[level * f..(level + 1) * f].iter_mut().zip(src) {
                *o += weight * v;
            }
        });
        Ok(())
    }

    /// Gradients of `<upstream, encode(x)>` with respect to the tables
    /// (sparse, at most `8 * levels` rows) and to `x`.
    ///
    /// At cell faces the derivative of the cell chosen by `floor` is used.
    pub fn encode_backward(&self, x: &Vec3, upstream: &[f64]) -> (SparseGridGrad, Vec3) {
        let f = self.config.features_per_level;
        let mut grad = SparseGridGrad {
            features_per_level: f,
            rows: Vec::with_capacity(8 * self.config.levels),
            values: Vec::with_capacity(8 * self.config.levels * f),
        };
        let gx = self.backward_with(x, upstream, |level, row, weight, up| {
            grad.rows.push((level as u32, row as u32));
            grad.values.extend(up.iter().map(|u| weight * u));
        });
        (grad, gx)
    }

    /// Like [`encode_backward`](Self::encode_backward) but accumulates the
    /// table gradient, scaled by `scale`, into `accum`.
    pub fn backward_accumulate(
        &self,
        x: &Vec3,
        upstream: &[f64],
        accum: &mut GridGradAccum,
    ) -> Vec3 {
        self.backward_with(x, upstream, |level, row, weight, up| {
            accum.add(level as u32, row as u32, weight, up);
        })
    }

    fn backward_with(
        &self,
        x: &Vec3,
        upstream: &[f64],
        mut sink: impl FnMut(usize, usize, f64, &[f64]),
    ) -> Vec3 {
        debug_assert_eq!(upstream.len(), self.output_dim());
        let f = self.config.features_per_level;
        let mut gx = Vec3::zeros();
        self.for_each_corner(x, |level, row, weight, dweight| {
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|u| *u == 0.0) {
                return;
            }
            let feat = &self.tables[level][row * f..(row + 1) * f];
            let dot: f64 = up.iter().zip(feat).map(|(u, v)| u * v).sum();
            for a in 0..3 {
                gx[a] += dot * dweight[a];
            }
            sink(level, row, weight, up);
        });
        gx
    }

    /// Every `(level, row, weight)` touched by a query at `x`.
    pub fn corners(&self, x: &Vec3) -> Vec<Corner> {
        let mut out = Vec::with_capacity(8 * self.config.levels);
        self.for_each_corner(x, |level, row, weight, _| {
            out.push(Corner {
                level: level as u32,
                row: row as u32,
                weight,
            })
        });
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tables.iter().flatten().all(|v| v.is_finite())
    }
}

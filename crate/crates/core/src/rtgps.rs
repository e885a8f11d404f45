//! Proximity search over per-Gaussian confidence spheres.
//!
//! Every Gaussian gets a sphere of radius `Q * sqrt(max variance)` around
//! its mean. A query returns the Gaussians whose sphere contains the point,
//! keeping the `k` closest by mean distance (ties by index). Spheres are
//! organized in a median-split BVH and tested exactly; the ray-distance
//! bound `t_max` is kept for a ray-cast backend.

use serde::{Deserialize, Serialize};

use crate::error::{GenieError, Result};
use crate::scene::{Gaussian, GaussianSet, Vec3};

const LEAF_SIZE: usize = 4;

/// How a Gaussian's covariance turns into a sphere radius.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMode {
    /// `Q * sqrt(max variance)`: bounds the Mahalanobis-Q ellipsoid.
    #[default]
    Sqrt,
    /// `Q * max variance`, the raw largest eigenvalue.
    RawEigenvalue,
}

pub fn effective_radius(g: &Gaussian, q: f64, mode: RadiusMode) -> f64 {
    debug_assert!(q > 0.0);
    let max_var = g.variance().max();
    match mode {
        RadiusMode::Sqrt => q * max_var.sqrt(),
        RadiusMode::RawEigenvalue => q * max_var,
    }
}

/// Up to `k` neighbors sorted by ascending mean distance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborResult {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    /// More than `k` spheres contained the query.
    pub overflowed: bool,
}

impl NeighborResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn clear(&mut self) {
        self.indices.clear();
        self.distances.clear();
        self.overflowed = false;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Aabb {
    min: [f64; 3],
    max: [f64; 3],
}

impl Aabb {
    const EMPTY: Aabb = Aabb {
        min: [f64::INFINITY; 3],
        max: [f64::NEG_INFINITY; 3],
    };

    fn of_sphere(c: &Vec3, r: f64) -> Aabb {
        Aabb {
            min: [c.x - r, c.y - r, c.z - r],
            max: [c.x + r, c.y + r, c.z + r],
        }
    }

    fn grow(&mut self, o: &Aabb) {
        for a in 0..3 {
            self.min[a] = self.min[a].min(o.min[a]);
            self.max[a] = self.max[a].max(o.max[a]);
        }
    }

    #[inline]
    fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    fn contains_box(&self, o: &Aabb) -> bool {
        (0..3).all(|a| o.min[a] >= self.min[a] && o.max[a] <= self.max[a])
    }
}

#[derive(Clone, Debug)]
struct Node {
    bounds: Aabb,
    /// Leaf: range into `order`. Interior: `start` is the right child, the
    /// left child is the next node.
    start: u32,
    count: u32,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.count > 0
    }
}

/// BVH over Gaussian confidence spheres, immutable after build.
#[derive(Clone, Debug)]
pub struct ProximityIndex {
    nodes: Vec<Node>,
    order: Vec<u32>,
    radii: Vec<f64>,
    built_epoch: u64,
    q: f64,
    t_max: f64,
    mode: RadiusMode,
}

impl ProximityIndex {
    pub fn build(set: &GaussianSet, q: f64) -> Result<Self> {
        Self::build_with_mode(set, q, RadiusMode::Sqrt)
    }

    pub fn build_with_mode(set: &GaussianSet, q: f64, mode: RadiusMode) -> Result<Self> {
        if set.is_empty() {
            return Err(GenieError::EmptyScene);
        }
        if !(q > 0.0 && q.is_finite()) {
            return Err(GenieError::InvalidConfig(format!("quantile Q must be positive, got {q}")));
        }
        let gs = set.gaussians();
        let radii: Vec<f64> = gs.iter().map(|g| effective_radius(g, q, mode)).collect();
        if let Some(i) = radii.iter().position(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(GenieError::InvalidConfig(format!(
                "gaussian {i} has invalid radius {}",
                radii[i]
            )));
        }
        let boxes: Vec<Aabb> = gs
            .iter()
            .zip(&radii)
            .map(|(g, r)| Aabb::of_sphere(&g.mean, *r))
            .collect();
        let mut order: Vec<u32> = (0..gs.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * gs.len() / LEAF_SIZE + 1);
        build_node(&mut nodes, &mut order, 0, &boxes, gs);
        let t_max = 2.0 * radii.iter().cloned().fold(0.0, f64::max);
        Ok(ProximityIndex {
            nodes,
            order,
            radii,
            built_epoch: set.epoch(),
            q,
            t_max,
            mode,
        })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn built_epoch(&self) -> u64 {
        self.built_epoch
    }

    pub fn radius_mode(&self) -> RadiusMode {
        self.mode
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    /// Overwrites stored radii without rebuilding; used to inject faults in
    /// verification tests.
    #[doc(hidden)]
    pub fn radii_mut(&mut self) -> &mut [f64] {
        &mut self.radii
    }

    /// Bounds of all confidence spheres.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let b = &self.nodes[0].bounds;
        (Vec3::from(b.min), Vec3::from(b.max))
    }

    pub fn check_fresh(&self, set: &GaussianSet) -> Result<()> {
        if set.epoch() != self.built_epoch || set.len() != self.radii.len() {
            return Err(GenieError::StaleIndex {
                built: self.built_epoch,
                current: set.epoch(),
            });
        }
        Ok(())
    }

    pub fn query(&self, set: &GaussianSet, x: &Vec3, k: usize) -> Result<NeighborResult> {
        let mut out = NeighborResult::default();
        let mut scratch = Vec::new();
        self.check_fresh(set)?;
        self.query_unchecked(set, x, k, &mut scratch, &mut out);
        Ok(out)
    }

    /// Query without the epoch check, reusing buffers. The caller guarantees
    /// the index is fresh.
    pub fn query_unchecked(
        &self,
        set: &GaussianSet,
        x: &Vec3,
        k: usize,
        scratch: &mut Vec<(f64, u32)>,
        out: &mut NeighborResult,
    ) {
        debug_assert!(k >= 1);
        scratch.clear();
        out.clear();
        let gs = set.gaussians();
        let mut stack = [0u32; 96];
        let mut sp = 1usize;
        while sp > 0 {
            sp -= 1;
            let ni = stack[sp] as usize;
            let node = &self.nodes[ni];
            if !node.bounds.contains(x) {
                continue;
            }
            if node.is_leaf() {
                for &i in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let d = (x - gs[i as usize].mean).norm();
                    if d <= self.radii[i as usize] {
                        scratch.push((d, i));
                    }
                }
            } else {
                stack[sp] = node.start;
                stack[sp + 1] = ni as u32 + 1;
                sp += 2;
            }
        }
        select_k(scratch, k, out);
        #[cfg(debug_assertions)]
        for (&i, &d) in out.indices.iter().zip(&out.distances) {
            debug_assert!(d <= self.radii[i], "unsound neighbor {i}");
        }
    }

    /// Tree depth and whether every child box lies within its parent.
    pub fn audit(&self) -> (usize, bool) {
        fn walk(idx: usize, nodes: &[Node], depth: usize, acc: &mut (usize, bool)) {
            acc.0 = acc.0.max(depth);
            let n = &nodes[idx];
            if n.is_leaf() {
                return;
            }
            for child in [idx + 1, n.start as usize] {
                if !n.bounds.contains_box(&nodes[child].bounds) {
                    acc.1 = false;
                }
                walk(child, nodes, depth + 1, acc);
            }
        }
        let mut acc = (0, true);
        walk(0, &self.nodes, 1, &mut acc);
        (acc.0, acc.1)
    }

    /// Whether every sphere's box sits inside its leaf's box.
    pub fn leaves_contain_spheres(&self, set: &GaussianSet) -> bool {
        self.nodes.iter().filter(|n| n.is_leaf()).all(|n| {
            self.order[n.start as usize..(n.start + n.count) as usize]
                .iter()
                .all(|&i| {
                    let g = set.get(i as usize);
                    n.bounds
                        .contains_box(&Aabb::of_sphere(&g.mean, self.radii[i as usize]))
                })
        })
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [u32],
    offset: usize,
    boxes: &[Aabb],
    gs: &[Gaussian],
) -> usize {
    let mut bounds = Aabb::EMPTY;
    for &i in order.iter() {
        bounds.grow(&boxes[i as usize]);
    }
    let idx = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node {
            bounds,
            start: offset as u32,
            count: order.len() as u32,
        });
        return idx;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        let m = &gs[i as usize].mean;
        for a in 0..3 {
            lo[a] = lo[a].min(m[a]);
            hi[a] = hi[a].max(m[a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        gs[a as usize].mean[axis]
            .total_cmp(&gs[b as usize].mean[axis])
            .then(a.cmp(&b))
    });
    nodes.push(Node {
        bounds,
        start: 0,
        count: 0,
    });
    let (left, right) = order.split_at_mut(mid);
    build_node(nodes, left, offset, boxes, gs);
    let r = build_node(nodes, right, offset + mid, boxes, gs);
    nodes[idx].start = r as u32;
    idx
}

/// Sorts candidates by `(distance, index)` and keeps the first `k`.
fn select_k(cands: &mut [(f64, u32)], k: usize, out: &mut NeighborResult) {
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    out.overflowed = cands.len() > k;
    let kept = if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, cmp);
        &mut cands[..k]
    } else {
        cands
    };
    kept.sort_unstable_by(cmp);
    for &(d, i) in kept.iter() {
        out.indices.push(i as usize);
        out.distances.push(d);
    }
}

/// Full-scan reference with the same semantics as [`ProximityIndex::query`].
pub fn brute_force_query(
    set: &GaussianSet,
    x: &Vec3,
    k: usize,
    q: f64,
    mode: RadiusMode,
) -> NeighborResult {
    let mut cands: Vec<(f64, u32)> = set
        .gaussians()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let d = (x - g.mean).norm();
            (d <= effective_radius(g, q, mode)).then_some((d, i as u32))
        })
        .collect();
    let mut out = NeighborResult::default();
    select_k(&mut cands, k, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(mean: [f64; 3], variance: f64) -> Gaussian {
        Gaussian::isotropic(Vec3::from(mean), variance, 1)
    }

    #[test]
    fn radius_from_isotropic_variance() {
        let r = effective_radius(&g([0.0; 3], 0.01), 2.0, RadiusMode::Sqrt);
        assert!((r - 0.2).abs() < 1e-12);
    }

    #[test]
    fn radius_uses_largest_axis() {
        let ga = Gaussian::new(Vec3::zeros(), Vec3::new(0.04f64.ln(), 0.01f64.ln(), 0.01f64.ln()), 1);
        assert!((effective_radius(&ga, 1.0, RadiusMode::Sqrt) - 0.2).abs() < 1e-12);
        assert!((effective_radius(&ga, 1.0, RadiusMode::RawEigenvalue) - 0.04).abs() < 1e-12);
    }

    #[test]
    fn t_max_is_twice_largest_radius() {
        let set = GaussianSet::new(vec![g([0.0; 3], 0.04), g([1.0, 0.0, 0.0], 0.25)]);
        let idx = ProximityIndex::build(&set, 1.0).unwrap();
        assert!((idx.t_max() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_gaussian_is_one_leaf() {
        let set = GaussianSet::new(vec![g([0.0; 3], 0.01)]);
        let idx = ProximityIndex::build(&set, 3.0).unwrap();
        assert_eq!(idx.nodes.len(), 1);
        assert!((idx.t_max() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(matches!(
            ProximityIndex::build(&GaussianSet::default(), 1.0),
            Err(GenieError::EmptyScene)
        ));
    }

    #[test]
    fn point_in_one_sphere() {
        let set = GaussianSet::new(vec![g([0.0; 3], 0.01), g([5.0, 0.0, 0.0], 0.01)]);
        let idx = ProximityIndex::build(&set, 2.0).unwrap();
        let r = idx.query(&set, &Vec3::new(0.05, 0.0, 0.0), 16).unwrap();
        assert_eq!(r.indices, vec![0]);
        assert!(!r.overflowed);
        let r = idx.query(&set, &Vec3::new(2.0, 0.0, 0.0), 16).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn ties_resolve_by_index() {
        let set = GaussianSet::new(vec![g([0.0; 3], 1.0), g([0.0; 3], 1.0), g([0.0; 3], 1.0)]);
        let x = Vec3::new(0.1, 0.0, 0.0);
        let r = brute_force_query(&set, &x, 2, 1.0, RadiusMode::Sqrt);
        assert_eq!(r.indices, vec![0, 1]);
        assert!(r.overflowed);
        let idx = ProximityIndex::build(&set, 1.0).unwrap();
        assert_eq!(idx.query(&set, &x, 2).unwrap(), r);
    }

    #[test]
    fn k_above_candidate_count_returns_all() {
        let set = GaussianSet::new(vec![g([0.0; 3], 1.0), g([0.5, 0.0, 0.0], 1.0)]);
        let r = brute_force_query(&set, &Vec3::zeros(), 10, 1.0, RadiusMode::Sqrt);
        assert_eq!(r.indices, vec![0, 1]);
        assert!(!r.overflowed);
    }

    #[test]
    fn stale_index_is_an_error() {
        let mut set = GaussianSet::new(vec![g([0.0; 3], 1.0)]);
        let idx = ProximityIndex::build(&set, 1.0).unwrap();
        set.mutate(|_| ());
        assert!(matches!(
            idx.query(&set, &Vec3::zeros(), 1),
            Err(GenieError::StaleIndex { built: 0, current: 1 })
        ));
    }

    #[test]
    fn large_tree_is_shallow_and_nested() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = GaussianSet::new(
            (0..10_000)
                .map(|_| {
                    g(
                        [rng.random(), rng.random(), rng.random()],
                        rng.random_range(1e-5..1e-3),
                    )
                })
                .collect(),
        );
        let idx = ProximityIndex::build(&set, 2.0).unwrap();
        let (depth, nested) = idx.audit();
        assert!(depth <= 64, "depth {depth}");
        assert!(nested);
        assert!(idx.leaves_contain_spheres(&set));
    }
}

//! Photometric training with Adam, densification and confidence pruning.
//!
//! Every step draws its batch and sample jitter from RNG streams keyed by
//! `(seed, step)`, reduces per-chunk gradients in chunk order and applies
//! updates on one thread, so a run is a pure function of its inputs and a
//! resumed run matches an uninterrupted one bit for bit.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{GenieError, Result};
use crate::field::FieldNetwork;
use crate::hashgrid::{GridGradAccum, HashGrid};
use crate::io::bytes::{ByteReader, ByteWriter};
use crate::io::checkpoint::{save_checkpoint, SceneBundle};
use crate::io::dataset::Dataset;
use crate::render::{
    backward_features_to_grid, backward_ray, pixel_rng, psnr, trace_ray, BackScratch, ModelGrads,
    RayRecord, RenderConfig, SceneView, TraceScratch,
};
use crate::rtgps::ProximityIndex;
use crate::scene::{Gaussian, GaussianSet, Vec3};
use crate::splash::{bake_features, FeatureMode, FeatureTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub field: f64,
    pub grid: f64,
    pub means: f64,
    pub log_scales: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            field: 1e-3,
            grid: 1e-2,
            means: 1e-4,
            log_scales: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        LearningRates {
            field: 0.0,
            grid: 0.0,
            means: 0.0,
            log_scales: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub interval_steps: u64,
    pub start_step: u64,
    /// Defaults to half the step count.
    pub end_step: Option<u64>,
    pub max_new_per_cycle: usize,
    pub tau_alpha: f64,
    pub tau_s: f64,
    /// logScale given to inserted Gaussians, per axis.
    pub init_log_scale: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            enabled: true,
            interval_steps: 500,
            start_step: 500,
            end_step: None,
            max_new_per_cycle: 10_000,
            tau_alpha: 0.5,
            tau_s: 0.001,
            init_log_scale: 1e-4f64.ln(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    #[default]
    Additive,
    Multiplicative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub enabled: bool,
    pub interval_steps: u64,
    pub lambda_d: f64,
    pub lambda_g: f64,
    pub tau: f64,
    pub mode: ConfidenceMode,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            enabled: true,
            interval_steps: 1000,
            lambda_d: 0.001,
            lambda_g: 0.01,
            tau: 0.1,
            mode: ConfidenceMode::Additive,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub rays_per_batch: usize,
    /// Rays per gradient chunk; chunks are reduced in order.
    pub chunk_size: usize,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub stratified: bool,
    pub learnable_means: bool,
    pub learnable_log_scales: bool,
    pub densify: DensifyConfig,
    pub prune: PruneConfig,
    pub seed: u64,
    pub log_interval: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            rays_per_batch: 256,
            chunk_size: 32,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            stratified: true,
            learnable_means: true,
            learnable_log_scales: true,
            densify: DensifyConfig::default(),
            prune: PruneConfig::default(),
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    /// Changes the step budget; an explicit densify end that would pass
    /// the new budget falls back to the default of half the steps.
    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
        if self.densify.end_step.is_some_and(|e| e > steps) {
            self.densify.end_step = None;
        }
    }

    pub fn densify_end(&self) -> u64 {
        self.densify.end_step.unwrap_or(self.steps / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GenieError::InvalidConfig(format!("train: {m}")));
        let d = &self.densify;
        let p = &self.prune;
        if self.rays_per_batch == 0 || self.chunk_size == 0 {
            return bad("rays_per_batch and chunk_size must be >= 1");
        }
        if !(d.tau_alpha > 0.0 && d.tau_alpha < 1.0) {
            return bad("densify.tau_alpha must lie in (0, 1)");
        }
        if !(d.tau_s > 0.0) {
            return bad("densify.tau_s must be positive");
        }
        if !(p.tau > 0.0 && p.tau < 1.0) {
            return bad("prune.tau must lie in (0, 1)");
        }
        if d.interval_steps == 0 || p.interval_steps == 0 {
            return bad("intervals must be >= 1");
        }
        if self.densify_end() > self.steps {
            return bad("densify.end_step exceeds steps");
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// New confidence of one Gaussian at a prune step.
pub fn update_confidence(c: f64, visited: bool, cfg: &PruneConfig) -> f64 {
    match (cfg.mode, visited) {
        (ConfidenceMode::Additive, true) => (c + cfg.lambda_g).min(1.0),
        (ConfidenceMode::Additive, false) => (c - cfg.lambda_d).max(0.0),
        (ConfidenceMode::Multiplicative, true) => (cfg.lambda_g * c).min(1.0),
        (ConfidenceMode::Multiplicative, false) => (cfg.lambda_d * c).max(0.0),
    }
}

/// Updates every confidence from the visit flags, then removes Gaussians
/// below `tau`. Returns the keep mask (one mutation of `set`).
pub fn prune(set: &mut GaussianSet, visited: &[bool], cfg: &PruneConfig) -> Vec<bool> {
    assert_eq!(visited.len(), set.len());
    set.mutate(|gs| {
        for (g, v) in gs.iter_mut().zip(visited) {
            g.confidence = update_confidence(g.confidence, *v, cfg);
        }
        let keep: Vec<bool> = gs.iter().map(|g| g.confidence >= cfg.tau).collect();
        let mut i = 0;
        gs.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        keep
    })
}

/// Uniform grid of cells of edge `cell`, used for nearest-mean rejection.
struct MeanHash {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<Vec3>>,
}

impl MeanHash {
    fn new(cell: f64) -> Self {
        MeanHash {
            cell,
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|a| (p[a] / self.cell).floor() as i64)
    }

    fn insert(&mut self, p: Vec3) {
        self.cells.entry(self.key(&p)).or_default().push(p);
    }

    /// True when some stored point lies within `cell` of `p`.
    fn any_within(&self, p: &Vec3) -> bool {
        let k = self.key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(pts) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        if pts.iter().any(|q| (q - p).norm() <= self.cell) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Inserts a Gaussian at each candidate `(position, alpha)` with
/// `alpha > tau_alpha` whose distance to every existing mean, including
/// ones inserted earlier in this call, exceeds `tau_s`. At most
/// `max_new_per_cycle` are added; the set is mutated once if any are.
pub fn densify(
    set: &mut GaussianSet,
    grid: &HashGrid,
    candidates: &[(Vec3, f64)],
    cfg: &DensifyConfig,
) -> usize {
    let mut hash = MeanHash::new(cfg.tau_s);
    for g in set.gaussians() {
        hash.insert(g.mean);
    }
    let mut fresh = Vec::new();
    for (p, a) in candidates {
        if fresh.len() >= cfg.max_new_per_cycle {
            break;
        }
        if !(*a > cfg.tau_alpha) || !p.iter().all(|v| v.is_finite()) || hash.any_within(p) {
            continue;
        }
        hash.insert(*p);
        let mut g = Gaussian::new(*p, Vec3::repeat(cfg.init_log_scale), 0);
        g.feature = grid.encode(p).expect("finite candidate");
        fresh.push(g);
    }
    let added = fresh.len();
    if added > 0 {
        set.mutate(|gs| gs.extend(fresh));
    }
    added
}

/// Adam moments for sparsely touched hash-grid rows. Untouched rows keep
/// their moments and parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseMoments {
    width: usize,
    slots: HashMap<(u32, u32), usize>,
    keys: Vec<(u32, u32)>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl SparseMoments {
    pub fn new(width: usize) -> Self {
        SparseMoments {
            width,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn slot(&mut self, key: (u32, u32)) -> usize {
        let w = self.width;
        *self.slots.entry(key).or_insert_with(|| {
            self.keys.push(key);
            self.m.extend(std::iter::repeat_n(0.0, w));
            self.v.extend(std::iter::repeat_n(0.0, w));
            self.keys.len() - 1
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
}

impl Adam {
    fn new(lr: f64, cfg: &TrainConfig, t: u64) -> Self {
        let t = t as i32;
        Adam {
            lr,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.adam_eps,
            c1: 1.0 - cfg.beta1.powi(t),
            c2: 1.0 - cfg.beta2.powi(t),
        }
    }

    #[inline]
    fn update(&self, p: &mut f64, m: &mut f64, v: &mut f64, g: f64) {
        *m = self.b1 * *m + (1.0 - self.b1) * g;
        *v = self.b2 * *v + (1.0 - self.b2) * g * g;
        let mh = *m / self.c1;
        let vh = *v / self.c2;
        *p -= self.lr * mh / (vh.sqrt() + self.eps);
    }

    fn update_vec3(&self, p: &mut Vec3, m: &mut Vec3, v: &mut Vec3, g: &Vec3) {
        for a in 0..3 {
            self.update(&mut p[a], &mut m[a], &mut v[a], g[a]);
        }
    }
}

/// Everything needed to continue a run: Adam moments, the completed step
/// count and the neighbor-visit flags of the current prune window.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub field_m: Vec<f64>,
    pub field_v: Vec<f64>,
    pub grid: SparseMoments,
    pub mean_m: Vec<Vec3>,
    pub mean_v: Vec<Vec3>,
    pub log_m: Vec<Vec3>,
    pub log_v: Vec<Vec3>,
    pub visited: Vec<bool>,
}

impl OptimizerState {
    pub fn new(num_params: usize, features_per_level: usize, n: usize) -> Self {
        OptimizerState {
            step: 0,
            field_m: vec![0.0; num_params],
            field_v: vec![0.0; num_params],
            grid: SparseMoments::new(features_per_level),
            mean_m: vec![Vec3::zeros(); n],
            mean_v: vec![Vec3::zeros(); n],
            log_m: vec![Vec3::zeros(); n],
            log_v: vec![Vec3::zeros(); n],
            visited: vec![false; n],
        }
    }

    pub fn gaussian_count(&self) -> usize {
        self.mean_m.len()
    }

    fn grow(&mut self, n: usize) {
        self.mean_m.resize(n, Vec3::zeros());
        self.mean_v.resize(n, Vec3::zeros());
        self.log_m.resize(n, Vec3::zeros());
        self.log_v.resize(n, Vec3::zeros());
        self.visited.resize(n, false);
    }

    fn compact(&mut self, keep: &[bool]) {
        fn retain<T: Clone>(v: &mut Vec<T>, keep: &[bool]) {
            let mut i = 0;
            v.retain(|_| {
                i += 1;
                keep[i - 1]
            });
        }
        retain(&mut self.mean_m, keep);
        retain(&mut self.mean_v, keep);
        retain(&mut self.log_m, keep);
        retain(&mut self.log_v, keep);
        retain(&mut self.visited, keep);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u64(self.step);
        w.f64s(&self.field_m);
        w.f64s(&self.field_v);
        w.u64(self.grid.width as u64);
        w.u64(self.grid.keys.len() as u64);
        for (l, r) in &self.grid.keys {
            w.u32(*l);
            w.u32(*r);
        }
        w.f64s(&self.grid.m);
        w.f64s(&self.grid.v);
        w.vec3s(&self.mean_m);
        w.vec3s(&self.mean_v);
        w.vec3s(&self.log_m);
        w.vec3s(&self.log_v);
        w.bools(&self.visited);
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Option<Self> {
        let mut r = ByteReader::new(data);
        let step = r.u64()?;
        let field_m = r.f64s()?;
        let field_v = r.f64s()?;
        let width = r.u64()? as usize;
        let nkeys = r.u64()? as usize;
        if nkeys.checked_mul(8)? > data.len() {
            return None;
        }
        let mut keys = Vec::with_capacity(nkeys);
        for _ in 0..nkeys {
            keys.push((r.u32()?, r.u32()?));
        }
        let m = r.f64s()?;
        let v = r.f64s()?;
        if m.len() != nkeys * width || v.len() != m.len() || field_m.len() != field_v.len() {
            return None;
        }
        let slots = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let state = OptimizerState {
            step,
            field_m,
            field_v,
            grid: SparseMoments {
                width,
                slots,
                keys,
                m,
                v,
            },
            mean_m: r.vec3s()?,
            mean_v: r.vec3s()?,
            log_m: r.vec3s()?,
            log_v: r.vec3s()?,
            visited: r.bools()?,
        };
        let n = state.mean_m.len();
        let consistent = [state.mean_v.len(), state.log_m.len(), state.log_v.len(), state.visited.len()]
            .iter()
            .all(|l| *l == n);
        (consistent && r.is_done()).then_some(state)
    }
}

/// One log line worth of training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    pub step: u64,
    pub loss: f64,
    pub gaussians: usize,
    pub psnr: f64,
}

impl fmt::Display for Progress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss={:.6} gaussians={} psnr={:.3}",
            self.step, self.loss, self.gaussians, self.psnr
        )
    }
}

/// Result of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub added: usize,
    pub removed: usize,
}

struct ChunkResult {
    grads: ModelGrads,
    loss: f64,
    candidates: Vec<(Vec3, f64)>,
    visited: Vec<u32>,
}

const BATCH_SALT: u64 = 0x6261_7463_6800_0001;
const JITTER_SALT: u64 = 0x6a69_7474_6572_0002;

/// Owns the scene, parameters and optimizer state of a training run.
pub struct Trainer {
    pub config: RunConfig,
    pub set: GaussianSet,
    pub grid: HashGrid,
    pub net: FieldNetwork,
    pub opt: OptimizerState,
    index: Option<ProximityIndex>,
}

impl Trainer {
    /// Fresh parameters from `config.train.seed`; every Gaussian's feature
    /// is resampled from the new grid.
    pub fn new(config: RunConfig, set: GaussianSet) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let grid = HashGrid::new(config.grid.clone(), seed)?;
        let net = FieldNetwork::new(grid.output_dim(), config.field.clone(), seed.wrapping_add(1));
        let (mut gs, epoch) = set.into_parts();
        for g in &mut gs {
            g.feature = grid.encode(&g.mean)?;
            g.baked = false;
        }
        let set = GaussianSet::with_epoch(gs, epoch);
        Self::from_parts(config, set, grid, net, None)
    }

    pub fn from_parts(
        config: RunConfig,
        set: GaussianSet,
        grid: HashGrid,
        net: FieldNetwork,
        opt: Option<OptimizerState>,
    ) -> Result<Self> {
        config.validate()?;
        if config.splash.mode != FeatureMode::Live {
            return Err(GenieError::InvalidConfig("training requires live features".into()));
        }
        let f = grid.config().features_per_level;
        let opt = opt.unwrap_or_else(|| OptimizerState::new(net.num_params(), f, set.len()));
        if opt.gaussian_count() != set.len() || opt.field_m.len() != net.num_params() {
            return Err(GenieError::InvalidConfig(
                "optimizer state does not match the scene".into(),
            ));
        }
        Ok(Trainer {
            config,
            set,
            grid,
            net,
            opt,
            index: None,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    fn ensure_index(&mut self) -> Result<()> {
        let fresh = self
            .index
            .as_ref()
            .is_some_and(|i| i.built_epoch() == self.set.epoch());
        if !fresh && !self.set.is_empty() {
            self.index = Some(self.config.splash.build_index(&self.set)?);
        }
        Ok(())
    }

    fn training_render_config(&self) -> RenderConfig {
        RenderConfig {
            stratified: self.config.train.stratified,
            ..self.config.render.clone()
        }
    }

    /// Loss and full gradients for a fixed list of `(frame, pixel)` rays
    /// with sample jitter from `jitter_seed`. Used by `step` and by
    /// gradient checks.
    pub fn loss_and_grads(
        &mut self,
        data: &Dataset,
        rays: &[(usize, usize)],
        jitter_seed: u64,
    ) -> Result<(f64, ModelGrads, Vec<(Vec3, f64)>, Vec<u32>)> {
        self.ensure_index()?;
        let features = FeatureTable::live(&self.set, &self.grid)?;
        let render = self.training_render_config();
        let view = SceneView {
            set: &self.set,
            index: self.index.as_ref(),
            features: &features,
            net: &self.net,
            splash: &self.config.splash,
            render: &render,
        };
        let n = self.set.len();
        let num_params = self.net.num_params();
        let dim = features.dim();
        let scale = 2.0 / (3.0 * rays.len() as f64);
        let chunks: Vec<ChunkResult> = rays
            .par_chunks(self.config.train.chunk_size)
            .enumerate()
            .map_init(
                || (TraceScratch::default(), BackScratch::default(), RayRecord::default()),
                |(ts, bs, rec), (ci, chunk)| {
                    let mut out = ChunkResult {
                        grads: ModelGrads::zeros(num_params, dim, n),
                        loss: 0.0,
                        candidates: Vec::with_capacity(chunk.len()),
                        visited: Vec::new(),
                    };
                    for (ri, &(frame, pixel)) in chunk.iter().enumerate() {
                        let fr = &data.frames[frame];
                        let (w, _) = (data.width as usize, data.height);
                        let ray = fr.camera.pixel_ray((pixel % w) as u32, (pixel / w) as u32);
                        let stream = (ci * self.config.train.chunk_size + ri) as u64;
                        let mut rng = pixel_rng(jitter_seed, stream);
                        trace_ray(&view, &ray, &mut rng, ts, Some(rec));
                        let gt = &fr.rgb[3 * pixel..3 * pixel + 3];
                        let mut dp = [0.0; 3];
                        for c in 0..3 {
                            let e = rec.pixel[c] - gt[c];
                            out.loss += e * e;
                            dp[c] = scale * e;
                        }
                        backward_ray(&view, rec, dp, &mut out.grads, bs);
                        if let Some(s) = rec.max_alpha_sample() {
                            out.candidates.push((s.position, s.alpha));
                        }
                        for s in &rec.samples {
                            out.visited.extend(s.neighbors.iter().map(|&i| i as u32));
                        }
                    }
                    out
                },
            )
            .collect();
        let mut total = ModelGrads::zeros(num_params, dim, n);
        let mut loss = 0.0;
        let mut candidates = Vec::new();
        let mut visited = Vec::new();
        for c in chunks {
            total.add(&c.grads);
            loss += c.loss;
            candidates.extend(c.candidates);
            visited.extend(c.visited);
        }
        Ok((loss / (3.0 * rays.len() as f64), total, candidates, visited))
    }

    fn sample_batch(&self, data: &Dataset) -> Vec<(usize, usize)> {
        let per_frame = (data.width * data.height) as usize;
        let total = per_frame * data.frames.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed ^ BATCH_SALT);
        rng.set_stream(self.opt.step);
        (0..self.config.train.rays_per_batch)
            .map(|_| {
                let id = rng.random_range(0..total);
                (id / per_frame, id % per_frame)
            })
            .collect()
    }

    /// Runs one optimization step, then densification and pruning when
    /// they are scheduled at the new step count.
    pub fn step(&mut self, data: &Dataset) -> Result<StepReport> {
        if data.frames.is_empty() {
            return Err(GenieError::Dataset("dataset has no frames".into()));
        }
        let batch = self.sample_batch(data);
        let step = self.opt.step;
        let jitter_seed = (self.config.train.seed ^ JITTER_SALT).wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (loss, mut grads, candidates, visited) = if self.set.is_empty() {
            (self.empty_scene_loss(data, &batch), ModelGrads::zeros(self.net.num_params(), self.grid.output_dim(), 0), Vec::new(), Vec::new())
        } else {
            self.loss_and_grads(data, &batch, jitter_seed)?
        };
        if !loss.is_finite() {
            let per_frame = (data.width * data.height) as usize;
            let id = |(f, p): (usize, usize)| f * per_frame + p;
            return Err(GenieError::NonFiniteLoss {
                step,
                first_pixel: id(batch[0]),
                last_pixel: id(*batch.last().unwrap()),
            });
        }
        for i in visited {
            self.opt.visited[i as usize] = true;
        }
        self.apply_gradients(&mut grads);
        self.opt.step += 1;
        let s = self.opt.step;
        let tc = &self.config.train;
        let mut report = StepReport {
            loss,
            added: 0,
            removed: 0,
        };
        if tc.densify.enabled
            && s % tc.densify.interval_steps == 0
            && s >= tc.densify.start_step
            && s <= tc.densify_end()
        {
            report.added = densify(&mut self.set, &self.grid, &candidates, &tc.densify);
            self.opt.grow(self.set.len());
        }
        if tc.prune.enabled && s % tc.prune.interval_steps == 0 && !self.set.is_empty() {
            let keep = prune(&mut self.set, &self.opt.visited, &tc.prune);
            report.removed = keep.iter().filter(|k| !**k).count();
            self.opt.compact(&keep);
            self.opt.visited.iter_mut().for_each(|v| *v = false);
        }
        Ok(report)
    }

    fn empty_scene_loss(&self, data: &Dataset, batch: &[(usize, usize)]) -> f64 {
        let bg = self.config.render.background;
        let mut loss = 0.0;
        for &(f, p) in batch {
            for c in 0..3 {
                loss += (bg[c] - data.frames[f].rgb[3 * p + c]).powi(2);
            }
        }
        loss / (3.0 * batch.len() as f64)
    }

    fn apply_gradients(&mut self, grads: &mut ModelGrads) {
        let tc = &self.config.train;
        let t = self.opt.step + 1;
        let n = self.set.len();
        let mut accum = GridGradAccum::new(self.grid.config().features_per_level);
        if n > 0 {
            backward_features_to_grid(&self.set, &self.grid, grads, &mut accum);
        }

        let adam = Adam::new(tc.lr.field, tc, t);
        let params = self.net.params_mut();
        for i in 0..params.len() {
            adam.update(&mut params[i], &mut self.opt.field_m[i], &mut self.opt.field_v[i], grads.net[i]);
        }

        let adam = Adam::new(tc.lr.grid, tc, t);
        let f = self.grid.config().features_per_level;
        for ((level, row), g) in accum.iter() {
            let slot = self.opt.grid.slot((level, row));
            let p = self.grid.row_mut(level as usize, row as usize);
            for c in 0..f {
                adam.update(
                    &mut p[c],
                    &mut self.opt.grid.m[slot * f + c],
                    &mut self.opt.grid.v[slot * f + c],
                    g[c],
                );
            }
        }

        if n == 0 || !(tc.learnable_means || tc.learnable_log_scales) {
            return;
        }
        let am = Adam::new(tc.lr.means, tc, t);
        let al = Adam::new(tc.lr.log_scales, tc, t);
        let (learn_mu, learn_ls) = (tc.learnable_means, tc.learnable_log_scales);
        let opt = &mut self.opt;
        self.set.mutate(|gs| {
            for (i, g) in gs.iter_mut().enumerate() {
                if learn_mu {
                    am.update_vec3(&mut g.mean, &mut opt.mean_m[i], &mut opt.mean_v[i], &grads.means[i]);
                }
                if learn_ls {
                    al.update_vec3(&mut g.log_scale, &mut opt.log_m[i], &mut opt.log_v[i], &grads.log_scales[i]);
                }
            }
        });
    }

    /// Steps until `stop_step` completed steps (capped at the configured
    /// total), calling `on_progress` every `log_interval` steps.
    pub fn train_until(
        &mut self,
        data: &Dataset,
        stop_step: u64,
        mut on_progress: impl FnMut(&Progress),
    ) -> Result<()> {
        let stop = stop_step.min(self.config.train.steps);
        let interval = self.config.train.log_interval.max(1);
        while self.opt.step < stop {
            let r = self.step(data)?;
            if self.opt.step % interval == 0 || self.opt.step == stop {
                on_progress(&Progress {
                    step: self.opt.step,
                    loss: r.loss,
                    gaussians: self.set.len(),
                    psnr: psnr(r.loss),
                });
            }
        }
        Ok(())
    }

    /// Freezes grid features onto the Gaussians.
    pub fn bake(&mut self) -> Result<()> {
        bake_features(&mut self.set, &self.grid)
    }

    pub fn from_bundle(bundle: SceneBundle) -> Result<Self> {
        let mut config = bundle.config;
        config.splash.mode = FeatureMode::Live;
        Self::from_parts(config, bundle.set, bundle.grid, bundle.net, bundle.optimizer)
    }

    pub fn to_bundle(&self) -> SceneBundle {
        SceneBundle {
            config: self.config.clone(),
            grid: self.grid.clone(),
            net: self.net.clone(),
            set: self.set.clone(),
            optimizer: Some(self.opt.clone()),
        }
    }

    /// Current proximity index, rebuilt if stale.
    pub fn index(&mut self) -> Result<Option<&ProximityIndex>> {
        self.ensure_index()?;
        Ok(self.index.as_ref())
    }
}

/// Trains to the configured step count, writing `out` every
/// `checkpoint_interval` steps and once more after the final bake.
pub fn run_training(
    trainer: &mut Trainer,
    data: &Dataset,
    out: Option<&Path>,
    mut on_progress: impl FnMut(&Progress),
) -> Result<SceneBundle> {
    if data.frames.is_empty() {
        return Err(GenieError::Dataset("dataset has no frames".into()));
    }
    let total = trainer.config.train.steps;
    let interval = trainer.config.train.checkpoint_interval;
    while trainer.step_count() < total {
        let next = if interval > 0 {
            (trainer.step_count() / interval + 1) * interval
        } else {
            total
        };
        trainer.train_until(data, next, &mut on_progress)?;
        if let (Some(path), true) = (out, trainer.step_count() < total) {
            save_checkpoint(&trainer.to_bundle(), path)?;
        }
    }
    trainer.bake()?;
    let bundle = trainer.to_bundle();
    if let Some(path) = out {
        save_checkpoint(&bundle, path)?;
    }
    Ok(bundle)
}

//! The neural field: splash feature plus encoded view direction to color
//! and density.
//!
//! Trunk: `F -> H -> H` with ReLU (or softplus, for a loss that is smooth
//! in every parameter). Density head reads the trunk and applies
//! softplus. Color head reads the trunk concatenated with a sinusoidal
//! direction encoding and applies a sigmoid. All parameters live in one
//! flat vector so optimizers and finite-difference checks can address them
//! uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GenieError, Result};
use crate::scene::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub hidden: usize,
    pub direction_frequencies: usize,
    pub hidden_activation: Activation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative at the pre-activation `z`.
    #[inline]
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Relu => f64::from(u8::from(z > 0.0)),
            Activation::Softplus => sigmoid(z),
        }
    }
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            hidden: 64,
            direction_frequencies: 4,
            hidden_activation: Activation::Relu,
        }
    }
}

/// Width of the direction encoding: the raw direction plus a sine and a
/// cosine per frequency and axis.
pub fn direction_encoding_dim(frequencies: usize) -> usize {
    3 + 6 * frequencies
}

pub fn encode_direction(d: &Vec3, frequencies: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(d.as_slice());
    for k in 0..frequencies {
        let scale = std::f64::consts::PI * (1u64 << k) as f64;
        for a in 0..3 {
            out.push((scale * d[a]).sin());
        }
        for a in 0..3 {
            out.push((scale * d[a]).cos());
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Offset of the `outputs x inputs` weights; biases follow.
    offset: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.inputs * self.outputs
    }

    #[inline]
    fn forward(&self, params: &[f64], x: &[f64], y: &mut [f64]) {
        let w = &params[self.offset..self.bias_offset()];
        let b = &params[self.bias_offset()..self.bias_offset() + self.outputs];
        for o in 0..self.outputs {
            let row = &w[o * self.inputs..(o + 1) * self.inputs];
            y[o] = b[o] + dot(row, x);
        }
    }

    /// Accumulates parameter gradients and returns `dx` into `dx`.
    #[inline]
    fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let bo = self.bias_offset();
        {
            let (gw, gb) = grad[self.offset..bo + self.outputs].split_at_mut(self.inputs * self.outputs);
            for o in 0..self.outputs {
                if dy[o] == 0.0 {
                    continue;
                }
                gb[o] += dy[o];
                axpy(dy[o], x, &mut gw[o * self.inputs..(o + 1) * self.inputs]);
            }
        }
        if let Some(dx) = dx {
            dx.fill(0.0);
            let w = &params[self.offset..bo];
            for o in 0..self.outputs {
                if dy[o] == 0.0 {
                    continue;
                }
                axpy(dy[o], &w[o * self.inputs..(o + 1) * self.inputs], dx);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Field network parameters (Θ) and layout.
#[derive(Clone, Debug)]
pub struct FieldNetwork {
    feature_dim: usize,
    config: FieldConfig,
    layers: [Dense; 4],
    params: Vec<f64>,
}

impl PartialEq for FieldNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.feature_dim == other.feature_dim
            && self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct FieldCache {
    pub input: Vec<f64>,
    pub dir: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    color_in: Vec<f64>,
    sigma_pre: f64,
    pub sigma: f64,
    pub color: [f64; 3],
}

impl FieldNetwork {
    fn layout(feature_dim: usize, config: &FieldConfig) -> ([Dense; 4], usize) {
        let h = config.hidden;
        let dd = direction_encoding_dim(config.direction_frequencies);
        let mut offset = 0;
        let mut mk = |inputs, outputs| {
            let d = Dense {
                inputs,
                outputs,
                offset,
            };
            offset += d.len();
            d
        };
        let layers = [mk(feature_dim, h), mk(h, h), mk(h, 1), mk(h + dd, 3)];
        (layers, offset)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(feature_dim: usize, config: FieldConfig, seed: u64) -> Self {
        let (layers, len) = Self::layout(feature_dim, &config);
        let mut params = vec![0.0; len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &layers {
            let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for w in &mut params[l.offset..l.bias_offset()] {
                *w = rng.random_range(-limit..limit);
            }
        }
        FieldNetwork {
            feature_dim,
            config,
            layers,
            params,
        }
    }

    pub fn zeros(feature_dim: usize, config: FieldConfig) -> Self {
        let (layers, len) = Self::layout(feature_dim, &config);
        FieldNetwork {
            feature_dim,
            config,
            layers,
            params: vec![0.0; len],
        }
    }

    pub fn from_params(feature_dim: usize, config: FieldConfig, params: Vec<f64>) -> Result<Self> {
        let (layers, len) = Self::layout(feature_dim, &config);
        if params.len() != len {
            return Err(GenieError::DimensionMismatch {
                what: "field network parameters",
                expected: len,
                got: params.len(),
            });
        }
        Ok(FieldNetwork {
            feature_dim,
            config,
            layers,
            params,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn direction_dim(&self) -> usize {
        direction_encoding_dim(self.config.direction_frequencies)
    }

    pub fn encode_direction(&self, d: &Vec3) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.direction_dim());
        encode_direction(d, self.config.direction_frequencies, &mut out);
        out
    }

    /// `(color, sigma)` for a feature and a unit view direction.
    pub fn forward(&self, feature: &[f64], direction: &Vec3) -> Result<([f64; 3], f64)> {
        if feature.len() != self.feature_dim {
            return Err(GenieError::DimensionMismatch {
                what: "field input feature",
                expected: self.feature_dim,
                got: feature.len(),
            });
        }
        if !feature.iter().all(|v| v.is_finite()) || !direction.iter().all(|v| v.is_finite()) {
            return Err(GenieError::NonFinite("field input"));
        }
        let dir = self.encode_direction(direction);
        let mut cache = FieldCache::default();
        self.forward_cached(feature, &dir, &mut cache);
        Ok((cache.color, cache.sigma))
    }

    /// Forward pass with a pre-encoded direction, keeping intermediates.
    pub fn forward_cached(&self, feature: &[f64], dir_enc: &[f64], cache: &mut FieldCache) {
        let h = self.config.hidden;
        let [l1, l2, ls, lc] = &self.layers;
        cache.input.clear();
        cache.input.extend_from_slice(feature);
        cache.dir.clear();
        cache.dir.extend_from_slice(dir_enc);
        let act = self.config.hidden_activation;
        cache.z1.resize(h, 0.0);
        cache.z2.resize(h, 0.0);
        cache.h1.resize(h, 0.0);
        cache.h2.resize(h, 0.0);
        l1.forward(&self.params, feature, &mut cache.z1);
        for (y, z) in cache.h1.iter_mut().zip(&cache.z1) {
            *y = act.apply(*z);
        }
        l2.forward(&self.params, &cache.h1, &mut cache.z2);
        for (y, z) in cache.h2.iter_mut().zip(&cache.z2) {
            *y = act.apply(*z);
        }
        let mut s = [0.0];
        ls.forward(&self.params, &cache.h2, &mut s);
        cache.sigma_pre = s[0];
        cache.sigma = softplus(s[0]);
        cache.color_in.clear();
        cache.color_in.extend_from_slice(&cache.h2);
        cache.color_in.extend_from_slice(dir_enc);
        let mut c = [0.0; 3];
        lc.forward(&self.params, &cache.color_in, &mut c);
        cache.color = c.map(sigmoid);
    }

    /// Accumulates `dL/dΘ` into `grad` and returns `dL/dfeature` given the
    /// upstream `dL/dsigma` and `dL/dcolor`.
    pub fn backward(&self, cache: &FieldCache, dsigma: f64, dcolor: [f64; 3], grad: &mut [f64]) -> Vec<f64> {
        let mut dfeature = vec![0.0; self.feature_dim];
        let mut scratch = BackwardScratch::default();
        self.backward_into(cache, dsigma, dcolor, grad, &mut dfeature, &mut scratch);
        dfeature
    }

    pub fn backward_into(
        &self,
        cache: &FieldCache,
        dsigma: f64,
        dcolor: [f64; 3],
        grad: &mut [f64],
        dfeature: &mut [f64],
        scratch: &mut BackwardScratch,
    ) {
        debug_assert_eq!(grad.len(), self.params.len());
        let h = self.config.hidden;
        let [l1, l2, ls, lc] = &self.layers;
        let dcolor_pre: [f64; 3] = [0, 1, 2].map(|i| dcolor[i] * cache.color[i] * (1.0 - cache.color[i]));
        let dsigma_pre = [dsigma * sigmoid(cache.sigma_pre)];

        scratch.dcolor_in.resize(lc.inputs, 0.0);
        lc.backward(&self.params, &cache.color_in, &dcolor_pre, grad, Some(&mut scratch.dcolor_in));
        scratch.dh2.resize(h, 0.0);
        ls.backward(&self.params, &cache.h2, &dsigma_pre, grad, Some(&mut scratch.dh2));
        let act = self.config.hidden_activation;
        for i in 0..h {
            scratch.dh2[i] = (scratch.dh2[i] + scratch.dcolor_in[i]) * act.slope(cache.z2[i]);
        }
        scratch.dh1.resize(h, 0.0);
        l2.backward(&self.params, &cache.h1, &scratch.dh2, grad, Some(&mut scratch.dh1));
        for i in 0..h {
            scratch.dh1[i] *= act.slope(cache.z1[i]);
        }
        l1.backward(&self.params, &cache.input, &scratch.dh1, grad, Some(dfeature));
    }
}

#[derive(Default)]
pub struct BackwardScratch {
    dcolor_in: Vec<f64>,
    dh1: Vec<f64>,
    dh2: Vec<f64>,
}

//! The shared synthesis MLP, SIREN residual blocks and the CoordNet teacher.
//!
//! Both networks keep their weights in a single flat buffer so they can be
//! evaluated statelessly from externally supplied weights. Layout: layers in
//! order, each layer's weight matrix (`out × in`, row-major) followed by its
//! bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash_encoding::HashEncoder;
use crate::numerics::{
    batch_affine, batch_affine_grad_input, batch_affine_grad_params, ParamBuffer, Rng,
};

/// SIREN frequency for the first layer (and, by default, the hidden ones).
pub const SIREN_OMEGA: f32 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    Sine { omega: f32 },
}

impl Activation {
    #[inline]
    fn apply(self, z: f32) -> f32 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Sine { omega } => (omega * z).sin(),
        }
    }

    #[inline]
    fn derivative(self, z: f32) -> f32 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sine { omega } => omega * (omega * z).cos(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpConfig {
    /// Four ReLU hidden layers of width 64.
    pub fn synthesis(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_width: 64,
            hidden_layers: 4,
            output_dim,
            activation: Activation::Relu,
        }
    }

    /// `(in, out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut prev = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((prev, self.hidden_width));
            prev = self.hidden_width;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || (self.hidden_layers > 0 && self.hidden_width == 0) {
            return Err(Error::Config(format!("degenerate MLP config {self:?}")));
        }
        Ok(())
    }
}

/// Shared synthesis network: a config plus its flat weight buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisMlp {
    pub config: MlpConfig,
    pub params: ParamBuffer,
}

impl SynthesisMlp {
    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: ParamBuffer::zeros(&[config.param_count()]),
            config,
        })
    }

    pub fn from_params(config: MlpConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::shape(format!("{} MLP parameters", config.param_count()), params.len()));
        }
        Ok(Self {
            params: ParamBuffer::from_flat(params)?,
            config,
        })
    }

    /// He-uniform fan-in initialization, zero biases.
    pub fn init_he(&mut self, rng: &mut Rng) {
        let mut offset = 0;
        let buf = self.params.as_mut_slice();
        for (inp, out) in self.config.layer_dims() {
            let bound = (6.0 / inp as f64).sqrt();
            for w in &mut buf[offset..offset + inp * out] {
                *w = rng.uniform(-bound, bound) as f32;
            }
            buf[offset + inp * out..offset + inp * out + out].fill(0.0);
            offset += inp * out + out;
        }
    }
}

pub fn mlp_forward(mlp: &SynthesisMlp, features: &[f32]) -> Result<Vec<f32>> {
    mlp_forward_with_weights(mlp.params.as_slice(), &mlp.config, features)
}

/// Stateless evaluation from a flat weight buffer.
pub fn mlp_forward_with_weights(weights: &[f32], config: &MlpConfig, features: &[f32]) -> Result<Vec<f32>> {
    if weights.len() != config.param_count() {
        return Err(Error::shape(format!("{} MLP parameters", config.param_count()), weights.len()));
    }
    if features.len() != config.input_dim {
        return Err(Error::shape(format!("{} input features", config.input_dim), features.len()));
    }
    let mut cache = MlpCache::default();
    Ok(mlp_forward_batch(config, weights, features, 1, &mut cache).to_vec())
}

/// Activations retained from a batched forward pass.
#[derive(Debug, Default, Clone)]
pub struct MlpCache {
    rows: usize,
    input: Vec<f32>,
    /// Pre-activations per layer (`rows × out`).
    pre: Vec<Vec<f32>>,
    /// Post-activations per hidden layer.
    post: Vec<Vec<f32>>,
    scratch: Vec<f32>,
}

impl MlpCache {
    pub fn output(&self) -> &[f32] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Batched forward over `rows` inputs (`rows × input_dim`). The returned
/// slice (`rows × output_dim`) lives in the cache.
pub fn mlp_forward_batch<'c>(
    config: &MlpConfig,
    weights: &[f32],
    input: &[f32],
    rows: usize,
    cache: &'c mut MlpCache,
) -> &'c [f32] {
    debug_assert_eq!(weights.len(), config.param_count());
    debug_assert_eq!(input.len(), rows * config.input_dim);
    let dims = config.layer_dims();
    let nl = dims.len();
    cache.rows = rows;
    cache.input.clear();
    cache.input.extend_from_slice(input);
    cache.pre.resize_with(nl, Vec::new);
    cache.post.resize_with(nl - 1, Vec::new);
    let mut offset = 0;
    for (l, &(inp, out)) in dims.iter().enumerate() {
        let w = &weights[offset..offset + inp * out];
        let b = &weights[offset + inp * out..offset + inp * out + out];
        offset += inp * out + out;
        let mut z = std::mem::take(&mut cache.pre[l]);
        z.resize(rows * out, 0.0);
        {
            let x: &[f32] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            batch_affine(x, rows, inp, w, b, out, &mut z);
        }
        if l + 1 < nl {
            let a = &mut cache.post[l];
            a.clear();
            a.extend(z.iter().map(|&v| config.activation.apply(v)));
        }
        cache.pre[l] = z;
    }
    cache.output()
}

/// Backward through the last [`mlp_forward_batch`]. Weight gradients are
/// accumulated into `grad_weights`; the input gradient (`rows × input_dim`)
/// is written to `grad_input` when given.
pub fn mlp_backward_batch(
    config: &MlpConfig,
    weights: &[f32],
    cache: &mut MlpCache,
    upstream: &[f32],
    grad_weights: &mut [f32],
    grad_input: Option<&mut [f32]>,
) {
    let dims = config.layer_dims();
    let rows = cache.rows;
    debug_assert_eq!(upstream.len(), rows * config.output_dim);
    debug_assert_eq!(grad_weights.len(), config.param_count());
    let mut offsets = Vec::with_capacity(dims.len());
    let mut acc = 0;
    for &(i, o) in &dims {
        offsets.push(acc);
        acc += i * o + o;
    }
    let mut delta = upstream.to_vec();
    let mut scratch = std::mem::take(&mut cache.scratch);
    for l in (0..dims.len()).rev() {
        let (inp, out) = dims[l];
        let off = offsets[l];
        let x: &[f32] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        let (gw, gb) = grad_weights[off..off + inp * out + out].split_at_mut(inp * out);
        batch_affine_grad_params(&delta, x, rows, inp, out, gw, gb);
        let w = &weights[off..off + inp * out];
        if l == 0 {
            if let Some(gx) = grad_input {
                batch_affine_grad_input(&delta, w, rows, inp, out, gx);
            }
            break;
        }
        scratch.resize(rows * inp, 0.0);
        batch_affine_grad_input(&delta, w, rows, inp, out, &mut scratch);
        for (d, &zv) in scratch.iter_mut().zip(&cache.pre[l - 1]) {
            *d *= config.activation.derivative(zv);
        }
        std::mem::swap(&mut delta, &mut scratch);
    }
    cache.scratch = scratch;
}

/// Single-sample backward: returns `(weight gradient, feature gradient)`.
pub fn mlp_backward(mlp: &SynthesisMlp, features: &[f32], upstream: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
    let cfg = &mlp.config;
    if features.len() != cfg.input_dim || upstream.len() != cfg.output_dim {
        return Err(Error::shape(
            format!("{} features / {} upstream", cfg.input_dim, cfg.output_dim),
            format!("{} / {}", features.len(), upstream.len()),
        ));
    }
    let mut cache = MlpCache::default();
    mlp_forward_batch(cfg, mlp.params.as_slice(), features, 1, &mut cache);
    let mut gw = vec![0.0; cfg.param_count()];
    let mut gx = vec![0.0; cfg.input_dim];
    mlp_backward_batch(cfg, mlp.params.as_slice(), &mut cache, upstream, &mut gw, Some(&mut gx));
    Ok((gw, gx))
}

/// Every hash-table entry i.i.d. uniform on the open interval `(-1e-4, 1e-4)`.
pub fn init_hash_encoder(encoder: &mut HashEncoder, rng: &mut Rng) {
    const BOUND: f32 = 1e-4;
    for p in encoder.params_mut() {
        *p = loop {
            let v = rng.uniform(-BOUND as f64, BOUND as f64) as f32;
            if v.abs() < BOUND {
                break v;
            }
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordNetConfig {
    /// Coordinate plus parameter dimension.
    pub input_dim: usize,
    pub output_dim: usize,
    pub width: usize,
    pub encoder_blocks: usize,
    pub trunk_blocks: usize,
    pub decoder_blocks: usize,
    pub first_omega: f32,
    pub hidden_omega: f32,
}

impl CoordNetConfig {
    /// 3 encoder resblocks, 10 trunk resblocks of width 256, 1 decoder resblock.
    pub fn full(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            width: 256,
            encoder_blocks: 3,
            trunk_blocks: 10,
            decoder_blocks: 1,
            first_omega: SIREN_OMEGA,
            hidden_omega: SIREN_OMEGA,
        }
    }

    pub fn blocks(&self) -> usize {
        self.encoder_blocks + self.trunk_blocks + self.decoder_blocks
    }

    pub fn param_count(&self) -> usize {
        let w = self.width;
        (self.input_dim * w + w) + self.blocks() * 2 * (w * w + w) + (w * self.output_dim + self.output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.width == 0 {
            return Err(Error::Config(format!("degenerate CoordNet config {self:?}")));
        }
        Ok(())
    }
}

/// `[0,1] → [-1,1]`.
#[inline]
pub fn range_convert(v: f32) -> f32 {
    2.0 * v - 1.0
}

/// `[-1,1] → [0,1]`.
#[inline]
pub fn range_invert(v: f32) -> f32 {
    0.5 * (v + 1.0)
}

/// Conditional SIREN teacher: sine input layer, residual sine blocks
/// `y = x + sin(ω(W₂·sin(ω(W₁x + b₁)) + b₂))`, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordNet {
    pub config: CoordNetConfig,
    pub params: ParamBuffer,
}

/// Forward activations kept for backprop.
#[derive(Debug, Default, Clone)]
pub struct CoordNetCache {
    rows: usize,
    input: Vec<f32>,
    first_pre: Vec<f32>,
    /// Block inputs, one per block plus the trunk output at the end.
    stream: Vec<Vec<f32>>,
    inner_pre: Vec<Vec<f32>>,
    inner_post: Vec<Vec<f32>>,
    outer_pre: Vec<Vec<f32>>,
    output: Vec<f32>,
}

impl CoordNetCache {
    /// Raw network output in `[-1,1]` space (`rows × output_dim`).
    pub fn raw_output(&self) -> &[f32] {
        &self.output
    }
}

struct CoordNetOffsets {
    first: usize,
    blocks: Vec<(usize, usize)>,
    last: usize,
}

impl CoordNet {
    pub fn zeros(config: CoordNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: ParamBuffer::zeros(&[config.param_count()]),
            config,
        })
    }

    pub fn from_params(config: CoordNetConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::shape(format!("{} CoordNet parameters", config.param_count()), params.len()));
        }
        Ok(Self {
            params: ParamBuffer::from_flat(params)?,
            config,
        })
    }

    fn offsets(&self) -> CoordNetOffsets {
        let c = &self.config;
        let w = c.width;
        let mut off = c.input_dim * w + w;
        let blocks = (0..c.blocks())
            .map(|_| {
                let a = off;
                let b = off + w * w + w;
                off = b + w * w + w;
                (a, b)
            })
            .collect();
        CoordNetOffsets {
            first: 0,
            blocks,
            last: off,
        }
    }

    /// Batched forward on `[0,1]` inputs. Returns `[0,1]`-space outputs.
    pub fn forward_batch(&self, input01: &[f32], rows: usize, cache: &mut CoordNetCache) -> Vec<f32> {
        let c = &self.config;
        let w = c.width;
        let p = self.params.as_slice();
        let offs = self.offsets();
        debug_assert_eq!(input01.len(), rows * c.input_dim);
        cache.rows = rows;
        cache.input.clear();
        cache.input.extend(input01.iter().map(|&v| range_convert(v)));

        cache.first_pre.resize(rows * w, 0.0);
        let (w0, b0) = p[offs.first..offs.first + c.input_dim * w + w].split_at(c.input_dim * w);
        batch_affine(&cache.input, rows, c.input_dim, w0, b0, w, &mut cache.first_pre);
        let nb = c.blocks();
        cache.stream.resize_with(nb + 1, Vec::new);
        cache.inner_pre.resize_with(nb, Vec::new);
        cache.inner_post.resize_with(nb, Vec::new);
        cache.outer_pre.resize_with(nb, Vec::new);
        let om1 = c.first_omega;
        let omh = c.hidden_omega;
        cache.stream[0].clear();
        cache.stream[0].extend(cache.first_pre.iter().map(|&z| (om1 * z).sin()));
        for (k, &(o1, o2)) in offs.blocks.iter().enumerate() {
            let (w1, b1) = p[o1..o1 + w * w + w].split_at(w * w);
            let (w2, b2) = p[o2..o2 + w * w + w].split_at(w * w);
            let mut zi = std::mem::take(&mut cache.inner_pre[k]);
            zi.resize(rows * w, 0.0);
            batch_affine(&cache.stream[k], rows, w, w1, b1, w, &mut zi);
            let hi = &mut cache.inner_post[k];
            hi.clear();
            hi.extend(zi.iter().map(|&z| (omh * z).sin()));
            let mut zo = std::mem::take(&mut cache.outer_pre[k]);
            zo.resize(rows * w, 0.0);
            batch_affine(&cache.inner_post[k], rows, w, w2, b2, w, &mut zo);
            let mut next = std::mem::take(&mut cache.stream[k + 1]);
            next.clear();
            next.extend(cache.stream[k].iter().zip(&zo).map(|(&x, &z)| x + (omh * z).sin()));
            cache.stream[k + 1] = next;
            cache.inner_pre[k] = zi;
            cache.outer_pre[k] = zo;
        }
        let (wl, bl) = p[offs.last..].split_at(w * c.output_dim);
        cache.output.resize(rows * c.output_dim, 0.0);
        batch_affine(&cache.stream[nb], rows, w, wl, bl, c.output_dim, &mut cache.output);
        cache.output.iter().map(|&v| range_invert(v)).collect()
    }

    /// Single-point forward; input and output in `[0,1]`.
    pub fn forward(&self, input01: &[f32]) -> Result<Vec<f32>> {
        if input01.len() != self.config.input_dim {
            return Err(Error::shape(format!("{} CoordNet inputs", self.config.input_dim), input01.len()));
        }
        let mut cache = CoordNetCache::default();
        Ok(self.forward_batch(input01, 1, &mut cache))
    }

    /// Backward through the last forward. `upstream` is the gradient with
    /// respect to the `[0,1]`-space outputs; parameter gradients accumulate
    /// into `grad`.
    pub fn backward_batch(&self, cache: &CoordNetCache, upstream01: &[f32], grad: &mut [f32]) {
        let c = &self.config;
        let w = c.width;
        let rows = cache.rows;
        let p = self.params.as_slice();
        let offs = self.offsets();
        debug_assert_eq!(grad.len(), c.param_count());
        let nb = c.blocks();
        // d(range_invert)/dy = 0.5
        let d_out: Vec<f32> = upstream01.iter().map(|&g| 0.5 * g).collect();
        let (wl, _) = p[offs.last..].split_at(w * c.output_dim);
        {
            let (gw, gb) = grad[offs.last..].split_at_mut(w * c.output_dim);
            batch_affine_grad_params(&d_out, &cache.stream[nb], rows, w, c.output_dim, gw, gb);
        }
        let mut d_stream = vec![0.0; rows * w];
        batch_affine_grad_input(&d_out, wl, rows, w, c.output_dim, &mut d_stream);
        let omh = c.hidden_omega;
        let mut d_zo = vec![0.0; rows * w];
        let mut d_zi = vec![0.0; rows * w];
        for k in (0..nb).rev() {
            let (o1, o2) = offs.blocks[k];
            for ((dz, &ds), &z) in d_zo.iter_mut().zip(&d_stream).zip(&cache.outer_pre[k]) {
                *dz = ds * omh * (omh * z).cos();
            }
            {
                let (gw, gb) = grad[o2..o2 + w * w + w].split_at_mut(w * w);
                batch_affine_grad_params(&d_zo, &cache.inner_post[k], rows, w, w, gw, gb);
            }
            batch_affine_grad_input(&d_zo, &p[o2..o2 + w * w], rows, w, w, &mut d_zi);
            for (dz, &z) in d_zi.iter_mut().zip(&cache.inner_pre[k]) {
                *dz *= omh * (omh * z).cos();
            }
            {
                let (gw, gb) = grad[o1..o1 + w * w + w].split_at_mut(w * w);
                batch_affine_grad_params(&d_zi, &cache.stream[k], rows, w, w, gw, gb);
            }
            // skip connection: d_stream carries through unchanged plus the branch
            let mut branch = std::mem::take(&mut d_zo);
            batch_affine_grad_input(&d_zi, &p[o1..o1 + w * w], rows, w, w, &mut branch);
            for (ds, b) in d_stream.iter_mut().zip(&branch) {
                *ds += b;
            }
            d_zo = branch;
        }
        let om1 = c.first_omega;
        for (ds, &z) in d_stream.iter_mut().zip(&cache.first_pre) {
            *ds *= om1 * (om1 * z).cos();
        }
        let (gw, gb) = grad[offs.first..offs.first + c.input_dim * w + w].split_at_mut(c.input_dim * w);
        batch_affine_grad_params(&d_stream, &cache.input, rows, c.input_dim, w, gw, gb);
    }
}

/// SIREN initialization: first layer `U(-1/n, 1/n)`, every later layer
/// `U(-√(6/n)/ω, √(6/n)/ω)` with `n` the fan-in; biases zero.
pub fn init_siren(net: &mut CoordNet, rng: &mut Rng) {
    let c = net.config;
    let w = c.width;
    let buf = net.params.as_mut_slice();
    let mut fill = |slice: &mut [f32], bound: f64| {
        for v in slice.iter_mut() {
            *v = rng.uniform(-bound, bound) as f32;
        }
    };
    let mut off = 0;
    fill(&mut buf[off..off + c.input_dim * w], 1.0 / c.input_dim as f64);
    buf[off + c.input_dim * w..off + c.input_dim * w + w].fill(0.0);
    off += c.input_dim * w + w;
    let hidden = (6.0 / w as f64).sqrt() / c.hidden_omega as f64;
    for _ in 0..2 * c.blocks() {
        fill(&mut buf[off..off + w * w], hidden);
        buf[off + w * w..off + w * w + w].fill(0.0);
        off += w * w + w;
    }
    fill(&mut buf[off..off + w * c.output_dim], hidden);
    buf[off + w * c.output_dim..].fill(0.0);
}

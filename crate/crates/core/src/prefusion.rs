//! Conv-attention pre-fusion of the audio, global-visual and temporal-visual
//! token streams.
//!
//! Each stream is standardized to `d` channels by its own affine map. The
//! standardized streams form two views: `F_d`, the token-axis concatenation
//! `[M*T x d]`, and `F_s`, the stack `[M x T x d]` along a new modality axis
//! (order: audio, global, temporal).
//!
//! * Attention branch: a two-layer perceptron on the token mean of `F_d`
//!   yields `M` logits; their softmax weights contract `F_s` over the
//!   modality axis, `F_attn = sum_m w_m F_s[m]`.
//! * Convolution branch: the modality mean of `F_s` passes through a stem
//!   convolution and `N` residual blocks `x + swish(conv(x))`.
//! * Output: `u_f = F_conv + F_attn`.
//!
//! All functions work on a single sample; batches are handled by the caller.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::TensorContainer;
use crate::linalg::{gemm, swish, swish_grad, Affine, View, ViewMut};
use crate::tensor::FeatureTensor;

pub const MODALITIES: usize = 3;
pub const MODALITY_NAMES: [&str; MODALITIES] = ["audio", "global", "temporal"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreFusionConfig {
    pub dim: usize,
    pub tokens: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
}

impl Default for PreFusionConfig {
    fn default() -> Self {
        Self { dim: 64, tokens: 64, n_blocks: 3, kernel_size: 3 }
    }
}

impl PreFusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.tokens == 0 {
            return Err(Error::Config("prefusion.dim and prefusion.tokens must be at least 1".into()));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("prefusion.n_blocks must be at least 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("prefusion.kernel_size must be odd, got {}", self.kernel_size)));
        }
        Ok(())
    }
}

/// Channel-mixing 1-D convolution over the token axis with `same` zero
/// padding. Weights are stored `[kernel x out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub channels: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn zeros(channels: usize, kernel: usize) -> Self {
        Self { channels, kernel, weight: vec![0.0; kernel * channels * channels], bias: vec![0.0; channels] }
    }

    /// Centre tap set to the identity matrix: an exact passthrough.
    pub fn identity(channels: usize, kernel: usize) -> Self {
        let mut c = Self::zeros(channels, kernel);
        let centre = kernel / 2;
        for i in 0..channels {
            c.weight[(centre * channels + i) * channels + i] = 1.0;
        }
        c
    }

    pub fn init_uniform(channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((channels * kernel) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            channels,
            kernel,
            weight: (0..kernel * channels * channels).map(|_| dist.sample(rng)).collect(),
            bias: (0..channels).map(|_| dist.sample(rng)).collect(),
        }
    }

    fn tap(&self, k: usize) -> &[f64] {
        let n = self.channels * self.channels;
        &self.weight[k * n..(k + 1) * n]
    }

    /// Destination row range and source row shift for tap `k` over `t` rows.
    fn tap_rows(&self, k: usize, t: usize) -> Option<(usize, usize, isize)> {
        let off = k as isize - (self.kernel / 2) as isize;
        let lo = (-off).max(0) as usize;
        let hi = (t as isize - off).min(t as isize);
        (hi > lo as isize).then_some((lo, hi as usize, off))
    }

    pub fn forward(&self, x: &[f64], t: usize) -> Vec<f64> {
        let d = self.channels;
        let mut out: Vec<f64> = (0..t).flat_map(|_| self.bias.iter().copied()).collect();
        for k in 0..self.kernel {
            let Some((lo, hi, off)) = self.tap_rows(k, t) else { continue };
            let src = (lo as isize + off) as usize;
            let rows = hi - lo;
            gemm(
                1.0,
                View::new(&x[src * d..(src + rows) * d], rows, d),
                View::new(self.tap(k), d, d).t(),
                1.0,
                ViewMut::new(&mut out[lo * d..hi * d], rows, d),
            );
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &[f64], dy: &[f64], t: usize, grad: &mut Conv1d) -> Vec<f64> {
        let d = self.channels;
        let n = d * d;
        let mut dx = vec![0.0; t * d];
        for k in 0..self.kernel {
            let Some((lo, hi, off)) = self.tap_rows(k, t) else { continue };
            let src = (lo as isize + off) as usize;
            let rows = hi - lo;
            gemm(
                1.0,
                View::new(&dy[lo * d..hi * d], rows, d).t(),
                View::new(&x[src * d..(src + rows) * d], rows, d),
                1.0,
                ViewMut::new(&mut grad.weight[k * n..(k + 1) * n], d, d),
            );
            gemm(
                1.0,
                View::new(&dy[lo * d..hi * d], rows, d),
                View::new(self.tap(k), d, d),
                1.0,
                ViewMut::new(&mut dx[src * d..(src + rows) * d], rows, d),
            );
        }
        for row in dy.chunks_exact(d) {
            for (g, v) in grad.bias.iter_mut().zip(row) {
                *g += v;
            }
        }
        dx
    }
}

/// All learnable parameters of the pre-fusion module. The same structure
/// holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PreFusionParams {
    /// Per-modality standardization maps (input dim -> d), order audio,
    /// global, temporal.
    pub modality_maps: [Affine; MODALITIES],
    pub attn_hidden: Affine,
    pub attn_out: Affine,
    pub conv_stem: Conv1d,
    pub conv_blocks: Vec<Conv1d>,
}

impl PreFusionParams {
    /// Random initialization. The attention output layer starts at zero so
    /// the initial modality weights are uniform.
    pub fn init(cfg: &PreFusionConfig, input_dims: [usize; MODALITIES], rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let modality_maps = [
            Affine::init_uniform(input_dims[0], d, rng),
            Affine::init_uniform(input_dims[1], d, rng),
            Affine::init_uniform(input_dims[2], d, rng),
        ];
        let attn_hidden = Affine::init_uniform(d, d, rng);
        let conv_stem = Conv1d::init_uniform(d, cfg.kernel_size, rng);
        let conv_blocks = (0..cfg.n_blocks).map(|_| Conv1d::init_uniform(d, cfg.kernel_size, rng)).collect();
        Ok(Self { modality_maps, attn_hidden, attn_out: Affine::zeros(d, MODALITIES), conv_stem, conv_blocks })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &Affine| Affine::zeros(a.in_dim, a.out_dim);
        let zc = |c: &Conv1d| Conv1d::zeros(c.channels, c.kernel);
        Self {
            modality_maps: [z(&self.modality_maps[0]), z(&self.modality_maps[1]), z(&self.modality_maps[2])],
            attn_hidden: z(&self.attn_hidden),
            attn_out: z(&self.attn_out),
            conv_stem: zc(&self.conv_stem),
            conv_blocks: self.conv_blocks.iter().map(zc).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.conv_stem.channels
    }

    /// Named parameter tensors with their shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, m) in MODALITY_NAMES.iter().zip(&self.modality_maps) {
            out.push((format!("mlp.{name}.weight"), vec![m.out_dim, m.in_dim], &m.weight[..]));
            out.push((format!("mlp.{name}.bias"), vec![m.out_dim], &m.bias[..]));
        }
        for (name, m) in [("attn.hidden", &self.attn_hidden), ("attn.out", &self.attn_out)] {
            out.push((format!("{name}.weight"), vec![m.out_dim, m.in_dim], &m.weight[..]));
            out.push((format!("{name}.bias"), vec![m.out_dim], &m.bias[..]));
        }
        let convs = std::iter::once(("conv.stem".to_string(), &self.conv_stem))
            .chain(self.conv_blocks.iter().enumerate().map(|(i, c)| (format!("conv.block{i}"), c)));
        for (name, c) in convs {
            out.push((format!("{name}.weight"), vec![c.kernel, c.channels, c.channels], &c.weight[..]));
            out.push((format!("{name}.bias"), vec![c.channels], &c.bias[..]));
        }
        out
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for m in self.modality_maps.iter_mut() {
            out.push(&mut m.weight);
            out.push(&mut m.bias);
        }
        for m in [&mut self.attn_hidden, &mut self.attn_out] {
            out.push(&mut m.weight);
            out.push(&mut m.bias);
        }
        for c in std::iter::once(&mut self.conv_stem).chain(self.conv_blocks.iter_mut()) {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        for (name, dims, v) in self.tensors() {
            c.insert(name, FeatureTensor::new(dims, v.to_vec()).expect("finite parameters"));
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let affine = |name: &str| -> Result<Affine> {
            let w = c.require(&format!("{name}.weight"))?;
            let b = c.require(&format!("{name}.bias"))?;
            let (out_dim, in_dim) = w.as_matrix()?;
            Affine::from_parts(in_dim, out_dim, w.data().to_vec(), b.data().to_vec())
        };
        let conv = |name: &str| -> Result<Conv1d> {
            let w = c.require(&format!("{name}.weight"))?;
            let b = c.require(&format!("{name}.bias"))?;
            let [kernel, co, ci] = w.dims()[..] else {
                return Err(Error::Shape(format!("{name}.weight must be [k x d x d]")));
            };
            if co != ci || b.len() != co {
                return Err(Error::Shape(format!("{name}: inconsistent channel counts")));
            }
            Ok(Conv1d { channels: co, kernel, weight: w.data().to_vec(), bias: b.data().to_vec() })
        };
        let mut conv_blocks = Vec::new();
        while c.get(&format!("conv.block{}.weight", conv_blocks.len())).is_some() {
            conv_blocks.push(conv(&format!("conv.block{}", conv_blocks.len()))?);
        }
        let p = Self {
            modality_maps: [affine("mlp.audio")?, affine("mlp.global")?, affine("mlp.temporal")?],
            attn_hidden: affine("attn.hidden")?,
            attn_out: affine("attn.out")?,
            conv_stem: conv("conv.stem")?,
            conv_blocks,
        };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.dim();
        let bad = self.modality_maps.iter().any(|m| m.out_dim != d)
            || self.attn_hidden.in_dim != d
            || self.attn_hidden.out_dim != d
            || self.attn_out.in_dim != d
            || self.attn_out.out_dim != MODALITIES
            || self.conv_blocks.is_empty()
            || self.conv_blocks.iter().any(|c| c.channels != d || c.kernel != self.conv_stem.kernel);
        if bad {
            return Err(Error::Shape("pre-fusion parameters have inconsistent shapes".into()));
        }
        Ok(())
    }
}

/// The two standardized views of the three streams.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridStructures {
    /// `[M*T x d]` token-axis concatenation.
    pub f_d: FeatureTensor,
    /// `[M x T x d]` modality-axis stack.
    pub f_s: FeatureTensor,
}

impl HybridStructures {
    pub fn tokens(&self) -> usize {
        self.f_s.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.f_s.dims()[2]
    }

    pub fn slice(&self, m: usize) -> &[f64] {
        self.f_s.row(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub f_attn: FeatureTensor,
    pub f_conv: FeatureTensor,
    pub u_f: FeatureTensor,
    /// Softmax modality weights used by the attention branch.
    pub weights: [f64; MODALITIES],
}

/// `sum_m w_m * slices[m]`, accumulated in modality order. The conv branch
/// uses the same routine with `w_m = 1/M` for its modality mean.
pub fn weighted_modality_sum(h: &HybridStructures, weights: &[f64; MODALITIES]) -> Vec<f64> {
    let mut out = vec![0.0; h.tokens() * h.dim()];
    for (m, &w) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(h.slice(m)) {
            *o += w * v;
        }
    }
    out
}

pub fn modality_mean(h: &HybridStructures) -> Vec<f64> {
    weighted_modality_sum(h, &[1.0 / MODALITIES as f64; MODALITIES])
}

fn softmax3(logits: &[f64]) -> [f64; MODALITIES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    [e[0] / s, e[1] / s, e[2] / s]
}

/// Maps each stream through its affine map and builds `F_d` and `F_s`.
pub fn standardize(
    u_a: &FeatureTensor,
    u_glo: &FeatureTensor,
    u_temp: &FeatureTensor,
    params: &PreFusionParams,
) -> Result<HybridStructures> {
    let streams = [u_a, u_glo, u_temp];
    let mut t = None;
    for (name, s) in MODALITY_NAMES.iter().zip(streams) {
        let (rows, _) = s.as_matrix()?;
        match t {
            None => t = Some(rows),
            Some(t0) if t0 != rows => {
                return Err(Error::UnalignedStreams(format!("{name} has {rows} tokens, expected {t0}")))
            }
            _ => {}
        }
    }
    let t = t.unwrap_or(0);
    let d = params.dim();
    let mut stacked = Vec::with_capacity(MODALITIES * t * d);
    for ((name, s), map) in MODALITY_NAMES.iter().zip(streams).zip(&params.modality_maps) {
        if s.dims()[1] != map.in_dim {
            return Err(Error::Shape(format!(
                "{name} stream has {} features, its map expects {}",
                s.dims()[1],
                map.in_dim
            )));
        }
        stacked.extend(map.apply_rows(s.data(), t));
    }
    Ok(HybridStructures {
        f_d: FeatureTensor::new(vec![MODALITIES * t, d], stacked.clone())?,
        f_s: FeatureTensor::new(vec![MODALITIES, t, d], stacked)?,
    })
}

struct AttnCache {
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    weights: [f64; MODALITIES],
}

fn attention_weights_cached(h: &HybridStructures, params: &PreFusionParams) -> Result<AttnCache> {
    let d = h.dim();
    let rows = h.f_d.rows();
    let mut pooled = vec![0.0; d];
    for row in h.f_d.data().chunks_exact(d) {
        for (p, v) in pooled.iter_mut().zip(row) {
            *p += v;
        }
    }
    pooled.iter_mut().for_each(|p| *p /= rows as f64);
    let hidden_pre = params.attn_hidden.apply_vec(&pooled);
    let hidden: Vec<f64> = hidden_pre.iter().map(|&z| swish(z)).collect();
    let logits = params.attn_out.apply_vec(&hidden);
    let weights = softmax3(&logits);
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::AttentionOverflow);
    }
    Ok(AttnCache { pooled, hidden_pre, hidden, weights })
}

/// Softmax modality weights computed from the token mean of `F_d`.
pub fn attention_weights(h: &HybridStructures, params: &PreFusionParams) -> Result<[f64; MODALITIES]> {
    Ok(attention_weights_cached(h, params)?.weights)
}

/// Contracts `F_s` with fixed modality weights: the `[1 x M] x [M x T*d]`
/// product reshaped to `[T x d]`.
pub fn mix_modalities(h: &HybridStructures, weights: &[f64; MODALITIES]) -> Result<FeatureTensor> {
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::AttentionOverflow);
    }
    FeatureTensor::new(vec![h.tokens(), h.dim()], weighted_modality_sum(h, weights))
}

pub fn attention_branch(h: &HybridStructures, params: &PreFusionParams) -> Result<FeatureTensor> {
    mix_modalities(h, &attention_weights(h, params)?)
}

struct ConvCache {
    /// Input of the stem followed by the input of every block.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every block.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

fn conv_cached(h: &HybridStructures, params: &PreFusionParams) -> ConvCache {
    let t = h.tokens();
    let base = modality_mean(h);
    let mut x = params.conv_stem.forward(&base, t);
    let mut inputs = vec![base];
    let mut pre = Vec::with_capacity(params.conv_blocks.len());
    for block in &params.conv_blocks {
        let z = block.forward(&x, t);
        let next: Vec<f64> = x.iter().zip(&z).map(|(a, &b)| a + swish(b)).collect();
        inputs.push(std::mem::replace(&mut x, next));
        pre.push(z);
    }
    ConvCache { inputs, pre, output: x }
}

pub fn conv_branch(h: &HybridStructures, params: &PreFusionParams) -> Result<FeatureTensor> {
    if !params.is_finite() {
        return Err(Error::InvalidArgument("non-finite pre-fusion parameters".into()));
    }
    FeatureTensor::new(vec![h.tokens(), h.dim()], conv_cached(h, params).output)
}

/// Forward pass that keeps what the backward pass needs.
pub struct FuseTape {
    inputs: [FeatureTensor; MODALITIES],
    hybrid: HybridStructures,
    attn: AttnCache,
    conv: ConvCache,
    pub output: FusionOutput,
}

impl FuseTape {
    pub fn forward(
        u_a: &FeatureTensor,
        u_glo: &FeatureTensor,
        u_temp: &FeatureTensor,
        params: &PreFusionParams,
    ) -> Result<Self> {
        let hybrid = standardize(u_a, u_glo, u_temp, params)?;
        let attn = attention_weights_cached(&hybrid, params)?;
        let f_attn = mix_modalities(&hybrid, &attn.weights)?;
        let conv = conv_cached(&hybrid, params);
        let f_conv = FeatureTensor::new(f_attn.dims().to_vec(), conv.output.clone())
            .map_err(|_| Error::InvalidArgument("non-finite convolution output".into()))?;
        let u_f: Vec<f64> = f_conv.data().iter().zip(f_attn.data()).map(|(c, a)| c + a).collect();
        let u_f = FeatureTensor::new(f_attn.dims().to_vec(), u_f)?;
        let weights = attn.weights;
        Ok(Self {
            inputs: [u_a.clone(), u_glo.clone(), u_temp.clone()],
            hybrid,
            attn,
            conv,
            output: FusionOutput { f_attn, f_conv, u_f, weights },
        })
    }

    /// Reverse-mode gradients of `<upstream, u_f>`.
    pub fn backward(&self, params: &PreFusionParams, upstream: &FeatureTensor) -> Result<FuseGradients> {
        if upstream.dims() != self.output.u_f.dims() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match fusion output {:?}",
                upstream.dims(),
                self.output.u_f.dims()
            )));
        }
        let (t, d) = (self.hybrid.tokens(), self.hybrid.dim());
        let g = upstream.data();
        let mut grads = params.zeros_like();
        // Gradient with respect to each standardized stream F_s[m].
        let mut d_std = vec![vec![0.0; t * d]; MODALITIES];

        // Attention branch.
        let w = self.attn.weights;
        let mut dw = [0.0; MODALITIES];
        for m in 0..MODALITIES {
            let s = self.hybrid.slice(m);
            dw[m] = g.iter().zip(s).map(|(a, b)| a * b).sum();
            for (o, gv) in d_std[m].iter_mut().zip(g) {
                *o += w[m] * gv;
            }
        }
        let dot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        let d_logits: Vec<f64> = (0..MODALITIES).map(|m| w[m] * (dw[m] - dot)).collect();
        let d_hidden = params.attn_out.backward_rows(&self.attn.hidden, &d_logits, 1, &mut grads.attn_out);
        let d_hidden_pre: Vec<f64> =
            d_hidden.iter().zip(&self.attn.hidden_pre).map(|(dh, &z)| dh * swish_grad(z)).collect();
        let d_pooled = params.attn_hidden.backward_rows(&self.attn.pooled, &d_hidden_pre, 1, &mut grads.attn_hidden);
        let scale = 1.0 / (MODALITIES * t) as f64;
        for ds in d_std.iter_mut() {
            for row in ds.chunks_exact_mut(d) {
                for (o, p) in row.iter_mut().zip(&d_pooled) {
                    *o += p * scale;
                }
            }
        }

        // Convolution branch, blocks in reverse.
        let mut dx = g.to_vec();
        for (k, block) in params.conv_blocks.iter().enumerate().rev() {
            let dz: Vec<f64> = dx.iter().zip(&self.conv.pre[k]).map(|(a, &z)| a * swish_grad(z)).collect();
            let dprev = block.backward(&self.conv.inputs[k + 1], &dz, t, &mut grads.conv_blocks[k]);
            dx.iter_mut().zip(&dprev).for_each(|(a, b)| *a += b);
        }
        let d_mean = params.conv_stem.backward(&self.conv.inputs[0], &dx, t, &mut grads.conv_stem);
        for ds in d_std.iter_mut() {
            for (o, v) in ds.iter_mut().zip(&d_mean) {
                *o += v / MODALITIES as f64;
            }
        }

        // Standardization maps.
        let mut d_inputs = Vec::with_capacity(MODALITIES);
        for m in 0..MODALITIES {
            let x = &self.inputs[m];
            let dxm = params.modality_maps[m].backward_rows(x.data(), &d_std[m], t, &mut grads.modality_maps[m]);
            d_inputs.push(FeatureTensor::new(x.dims().to_vec(), dxm)?);
        }
        let mut it = d_inputs.into_iter();
        Ok(FuseGradients {
            params: grads,
            d_audio: it.next().expect("three streams"),
            d_global: it.next().expect("three streams"),
            d_temporal: it.next().expect("three streams"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct FuseGradients {
    pub params: PreFusionParams,
    pub d_audio: FeatureTensor,
    pub d_global: FeatureTensor,
    pub d_temporal: FeatureTensor,
}

/// Standardize, run both branches and add them.
pub fn fuse(
    u_a: &FeatureTensor,
    u_glo: &FeatureTensor,
    u_temp: &FeatureTensor,
    params: &PreFusionParams,
) -> Result<FusionOutput> {
    Ok(FuseTape::forward(u_a, u_glo, u_temp, params)?.output)
}

/// Gradients of `<upstream, u_f>` with respect to every parameter and input.
pub fn fuse_backward(
    u_a: &FeatureTensor,
    u_glo: &FeatureTensor,
    u_temp: &FeatureTensor,
    params: &PreFusionParams,
    upstream: &FeatureTensor,
) -> Result<FuseGradients> {
    FuseTape::forward(u_a, u_glo, u_temp, params)?.backward(params, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> FeatureTensor {
        FeatureTensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn identity_params(d: usize, blocks: usize) -> PreFusionParams {
        PreFusionParams {
            modality_maps: [Affine::identity(d, d), Affine::identity(d, d), Affine::identity(d, d)],
            attn_hidden: Affine::zeros(d, d),
            attn_out: Affine::zeros(d, MODALITIES),
            conv_stem: Conv1d::identity(d, 3),
            conv_blocks: (0..blocks).map(|_| Conv1d::zeros(d, 3)).collect(),
        }
    }

    #[test]
    fn standardize_identity_maps_stack_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(4, 3, &mut rng);
        let h = standardize(&x, &x, &x, &identity_params(3, 1)).unwrap();
        assert_eq!(h.f_d.dims(), &[12, 3]);
        assert_eq!(h.f_s.dims(), &[3, 4, 3]);
        for m in 0..3 {
            assert_eq!(&h.f_d.data()[m * 12..(m + 1) * 12], x.data());
            assert_eq!(h.slice(m), x.data());
        }
    }

    #[test]
    fn standardize_zero_maps_give_zeros() {
        let mut p = identity_params(2, 1);
        for m in p.modality_maps.iter_mut() {
            *m = Affine::zeros(2, 2);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(3, 2, &mut rng);
        let h = standardize(&x, &x, &x, &p).unwrap();
        assert!(h.f_d.data().iter().chain(h.f_s.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_matches_hand_affine() {
        // Two tokens, d = 2; maps chosen by hand.
        let mut p = identity_params(2, 1);
        p.modality_maps[0] = Affine::from_parts(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.5, -0.5]).unwrap();
        p.modality_maps[1] = Affine::from_parts(2, 2, vec![0.0, 1.0, 1.0, 0.0], vec![0.0, 0.0]).unwrap();
        p.modality_maps[2] = Affine::from_parts(2, 2, vec![-1.0, 0.0, 0.0, 2.0], vec![1.0, 1.0]).unwrap();
        let x = FeatureTensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let h = standardize(&x, &x, &x, &p).unwrap();
        // audio row0: [1*1+2*-1+0.5, 3*1+4*-1-0.5] = [-0.5, -1.5]; row1: [0.5+4+0.5, 1.5+8-0.5] = [5, 9]
        // global swaps columns; temporal: [-x0+1, 2*x1+1]
        let want = [-0.5, -1.5, 5.0, 9.0, -1.0, 1.0, 2.0, 0.5, 0.0, -1.0, 0.5, 5.0];
        assert_eq!(h.f_d.data(), &want);
    }

    #[test]
    fn standardize_rejects_unaligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (rand_tensor(4, 2, &mut rng), rand_tensor(5, 2, &mut rng));
        assert!(matches!(standardize(&a, &b, &a, &identity_params(2, 1)), Err(Error::UnalignedStreams(_))));
    }

    #[test]
    fn attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b, c) = (rand_tensor(3, 2, &mut rng), rand_tensor(3, 2, &mut rng), rand_tensor(3, 2, &mut rng));
        let p = identity_params(2, 1);
        let h = standardize(&a, &b, &c, &p).unwrap();
        // zero attention output layer -> uniform logits -> modality mean
        let f = attention_branch(&h, &p).unwrap();
        for i in 0..6 {
            let mean = (a.data()[i] + b.data()[i] + c.data()[i]) / 3.0;
            assert!((f.data()[i] - mean).abs() < 1e-15);
        }
        assert_eq!(mix_modalities(&h, &[1.0, 0.0, 0.0]).unwrap().data(), a.data());

        let one = |v: f64| FeatureTensor::new(vec![1, 1], vec![v]).unwrap();
        let p1 = identity_params(1, 1);
        let h1 = standardize(&one(1.0), &one(2.0), &one(3.0), &p1).unwrap();
        let f1 = mix_modalities(&h1, &[0.2, 0.3, 0.5]).unwrap();
        assert!((f1.data()[0] - 2.3).abs() < 1e-15);
        assert!(matches!(mix_modalities(&h1, &[f64::NAN, 0.0, 1.0]), Err(Error::AttentionOverflow)));
    }

    #[test]
    fn conv_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(5, 3, &mut rng);
        let p = identity_params(3, 2);
        let h = standardize(&x, &x, &x, &p).unwrap();
        assert_eq!(conv_branch(&h, &p).unwrap().data(), &modality_mean(&h)[..]);

        // One block with a centred identity kernel on an all-ones input.
        let mut p = identity_params(2, 1);
        p.conv_blocks[0] = Conv1d::identity(2, 3);
        let ones = FeatureTensor::new(vec![4, 2], vec![1.0; 8]).unwrap();
        let h = standardize(&ones, &ones, &ones, &p).unwrap();
        let out = conv_branch(&h, &p).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.731_058_578_630_005).abs() < 1e-12));

        // Zero input with zero biases stays zero for random kernels.
        let mut p = identity_params(2, 2);
        p.conv_stem = Conv1d::init_uniform(2, 3, &mut rng);
        p.conv_stem.bias = vec![0.0; 2];
        for b in p.conv_blocks.iter_mut() {
            *b = Conv1d::init_uniform(2, 3, &mut rng);
            b.bias = vec![0.0; 2];
        }
        let z = FeatureTensor::zeros(&[4, 2]);
        let h = standardize(&z, &z, &z, &p).unwrap();
        assert!(conv_branch(&h, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_handles_kernels_longer_than_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = Conv1d::init_uniform(2, 7, &mut rng);
        let x = [1.0, 2.0, -1.0, 0.5];
        let y = c.forward(&x, 2);
        // Brute force same-padded convolution.
        for t in 0..2 {
            for o in 0..2 {
                let mut want = c.bias[o];
                for k in 0..7 {
                    let src = t as isize + k as isize - 3;
                    if (0..2).contains(&src) {
                        for i in 0..2 {
                            want += c.weight[(k * 2 + o) * 2 + i] * x[src as usize * 2 + i];
                        }
                    }
                }
                assert!((y[t * 2 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_adds_branches_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = PreFusionConfig { dim: 4, tokens: 4, n_blocks: 2, kernel_size: 3 };
        let p = PreFusionParams::init(&cfg, [3, 2, 5], &mut rng).unwrap();
        let (a, g, t) = (rand_tensor(4, 3, &mut rng), rand_tensor(4, 2, &mut rng), rand_tensor(4, 5, &mut rng));
        let out = fuse(&a, &g, &t, &p).unwrap();
        let h = standardize(&a, &g, &t, &p).unwrap();
        assert_eq!(out.f_attn, attention_branch(&h, &p).unwrap());
        assert_eq!(out.f_conv, conv_branch(&h, &p).unwrap());
        for i in 0..16 {
            assert_eq!(out.u_f.data()[i], out.f_attn.data()[i] + out.f_conv.data()[i]);
        }
        assert_eq!(fuse(&a, &g, &t, &p).unwrap(), out);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = PreFusionConfig { dim: 3, tokens: 3, n_blocks: 1, kernel_size: 3 };
        let p = PreFusionParams::init(&cfg, [2, 2, 2], &mut rng).unwrap();
        let x = rand_tensor(3, 2, &mut rng);
        let g = fuse_backward(&x, &x, &x, &p, &FeatureTensor::zeros(&[3, 3])).unwrap();
        assert!(g.params.tensors().iter().all(|(_, _, v)| v.iter().all(|&x| x == 0.0)));
        assert!(g.d_audio.data().iter().all(|&v| v == 0.0));
        assert!(fuse_backward(&x, &x, &x, &p, &FeatureTensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn params_container_roundtrip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = PreFusionParams::init(&PreFusionConfig::default(), [8, 6, 4], &mut rng).unwrap();
        let back = PreFusionParams::from_container(&p.to_container()).unwrap();
        assert_eq!(back.tensors().len(), p.tensors().len());
        for ((n1, d1, v1), (n2, d2, v2)) in p.tensors().iter().zip(back.tensors()) {
            assert_eq!((n1, d1), (&n2, &d2));
            // stored as f32
            assert!(v1.iter().zip(v2).all(|(a, b)| (a - b).abs() < 1e-6));
        }
        assert!(p.attn_out.weight.iter().all(|&w| w == 0.0));
    }
}

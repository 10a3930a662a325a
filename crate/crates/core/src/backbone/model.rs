//! Decoder-only transformer (pre-norm, RMSNorm, rotary positions, SiLU MLP)
//! with low-rank adapters on the query and value projections.
//!
//! Weights are `[out x in]` row-major f32. Training runs whole sequences;
//! generation uses a key/value cache.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::ToyLmConfig;
use crate::error::{Error, Result};
use crate::formats::TensorContainer;
use crate::linalg::{gemm, View, ViewMut};
use crate::tensor::FeatureTensor;

const NORM_EPS: f32 = 1e-5;

/// Low-rank update `(alpha / rank) * B * A` added to a frozen projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f32,
    /// `[rank x E]`
    pub a: Vec<f32>,
    /// `[E x rank]`, zero at initialization.
    pub b: Vec<f32>,
}

impl LoraAdapter {
    pub fn init(dim: usize, rank: usize, alpha: f32, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self { rank, alpha, a: (0..rank * dim).map(|_| dist.sample(rng)).collect(), b: vec![0.0; dim * rank] }
    }

    pub fn zeros(dim: usize, rank: usize, alpha: f32) -> Self {
        Self { rank, alpha, a: vec![0.0; rank * dim], b: vec![0.0; dim * rank] }
    }

    pub fn scale(&self) -> f32 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha / self.rank as f32
        }
    }
}

/// `W x + (alpha / r) * B (A x)` for a single vector.
pub fn lora_forward(x: &[f32], w: &[f32], adapter: &LoraAdapter) -> Vec<f32> {
    let e = x.len();
    let r = adapter.rank;
    let mut y: Vec<f32> = w.chunks_exact(e).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
    let ax: Vec<f32> = adapter.a.chunks_exact(e).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
    let s = adapter.scale();
    for (i, yi) in y.iter_mut().enumerate() {
        let bax: f32 = adapter.b[i * r..(i + 1) * r].iter().zip(&ax).map(|(a, b)| a * b).sum();
        *yi += s * bax;
    }
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    /// `[F x E]`
    pub w_up: Vec<f32>,
    /// `[E x F]`
    pub w_down: Vec<f32>,
}

/// Frozen-able base language model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLm {
    pub cfg: ToyLmConfig,
    /// `[V x E]`
    pub tok_emb: Vec<f32>,
    pub layers: Vec<Layer>,
    pub final_norm: Vec<f32>,
    /// `[V x E]`
    pub lm_head: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
}

impl BaseLm {
    pub fn init(cfg: &ToyLmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (e, f, v) = (cfg.embed_dim, cfg.mlp_dim(), cfg.vocab_size);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let resid = Normal::new(0.0f32, 0.02 / (2.0 * cfg.layers as f32).sqrt()).expect("valid std");
        let mut draw = |n: usize, d: &Normal<f32>| -> Vec<f32> { (0..n).map(|_| d.sample(rng)).collect() };
        let tok_emb = draw(v * e, &normal);
        let layers = (0..cfg.layers)
            .map(|_| Layer {
                attn_norm: vec![1.0; e],
                wq: draw(e * e, &normal),
                wk: draw(e * e, &normal),
                wv: draw(e * e, &normal),
                wo: draw(e * e, &resid),
                mlp_norm: vec![1.0; e],
                w_up: draw(f * e, &normal),
                w_down: draw(e * f, &resid),
            })
            .collect();
        let lm_head = draw(v * e, &normal);
        Ok(Self { cfg: cfg.clone(), tok_emb, layers, final_norm: vec![1.0; e], lm_head })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<f32>| vec![0.0; v.len()];
        Self {
            cfg: self.cfg.clone(),
            tok_emb: z(&self.tok_emb),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    attn_norm: z(&l.attn_norm),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    mlp_norm: z(&l.mlp_norm),
                    w_up: z(&l.w_up),
                    w_down: z(&l.w_down),
                })
                .collect(),
            final_norm: z(&self.final_norm),
            lm_head: z(&self.lm_head),
        }
    }

    /// Named tensors with shapes; norm gains have one dim.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let (e, f, v) = (self.cfg.embed_dim, self.cfg.mlp_dim(), self.cfg.vocab_size);
        let mut out: Vec<(String, Vec<usize>, &[f32])> = vec![("tok_emb".into(), vec![v, e], &self.tok_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm"), vec![e], &l.attn_norm));
            out.push((format!("layer{i}.wq"), vec![e, e], &l.wq));
            out.push((format!("layer{i}.wk"), vec![e, e], &l.wk));
            out.push((format!("layer{i}.wv"), vec![e, e], &l.wv));
            out.push((format!("layer{i}.wo"), vec![e, e], &l.wo));
            out.push((format!("layer{i}.mlp_norm"), vec![e], &l.mlp_norm));
            out.push((format!("layer{i}.w_up"), vec![f, e], &l.w_up));
            out.push((format!("layer{i}.w_down"), vec![e, f], &l.w_down));
        }
        out.push(("final_norm".into(), vec![e], &self.final_norm));
        out.push(("lm_head".into(), vec![v, e], &self.lm_head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![&mut self.tok_emb];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.attn_norm[..],
                &mut l.wq[..],
                &mut l.wk[..],
                &mut l.wv[..],
                &mut l.wo[..],
                &mut l.mlp_norm[..],
                &mut l.w_up[..],
                &mut l.w_down[..],
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        for (name, dims, v) in self.tensors() {
            let data = v.iter().map(|&x| x as f64).collect();
            c.insert(name, FeatureTensor::new(dims, data).expect("finite weights"));
        }
        c
    }

    pub fn from_container(cfg: &ToyLmConfig, c: &TensorContainer) -> Result<Self> {
        let mut m = Self::zeros_like(&Self::empty(cfg));
        let names: Vec<(String, Vec<usize>)> = m.tensors().into_iter().map(|(n, d, _)| (n, d)).collect();
        for ((name, dims), slot) in names.iter().zip(m.tensors_mut()) {
            let t = c.require(name)?;
            if t.dims() != &dims[..] {
                return Err(Error::Shape(format!("{name}: expected {dims:?}, found {:?}", t.dims())));
            }
            for (s, &v) in slot.iter_mut().zip(t.data()) {
                *s = v as f32;
            }
        }
        Ok(m)
    }

    fn empty(cfg: &ToyLmConfig) -> Self {
        let (e, f, v) = (cfg.embed_dim, cfg.mlp_dim(), cfg.vocab_size);
        let layer = Layer {
            attn_norm: vec![0.0; e],
            wq: vec![0.0; e * e],
            wk: vec![0.0; e * e],
            wv: vec![0.0; e * e],
            wo: vec![0.0; e * e],
            mlp_norm: vec![0.0; e],
            w_up: vec![0.0; f * e],
            w_down: vec![0.0; e * f],
        };
        Self {
            cfg: cfg.clone(),
            tok_emb: vec![0.0; v * e],
            layers: vec![layer; cfg.layers],
            final_norm: vec![0.0; e],
            lm_head: vec![0.0; v * e],
        }
    }
}

/// Per-layer query/value adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    pub layers: Vec<LoraLayer>,
}

impl LoraSet {
    pub fn init(cfg: &ToyLmConfig, rng: &mut impl Rng) -> Self {
        let (e, r, a) = (cfg.embed_dim, cfg.lora_rank, cfg.lora_alpha);
        Self {
            layers: (0..cfg.layers)
                .map(|_| LoraLayer { q: LoraAdapter::init(e, r, a, rng), v: LoraAdapter::init(e, r, a, rng) })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &LoraAdapter| LoraAdapter { a: vec![0.0; l.a.len()], b: vec![0.0; l.b.len()], ..l.clone() };
        Self { layers: self.layers.iter().map(|l| LoraLayer { q: z(&l.q), v: z(&l.v) }).collect() }
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (tag, ad) in [("q", &l.q), ("v", &l.v)] {
                let e = ad.a.len() / ad.rank.max(1);
                out.push((format!("layer{i}.{tag}.a"), vec![ad.rank, e], &ad.a));
                out.push((format!("layer{i}.{tag}.b"), vec![e, ad.rank], &ad.b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.q.a[..], &mut l.q.b[..], &mut l.v.a[..], &mut l.v.b[..]])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        for (name, dims, v) in self.tensors() {
            c.insert(name, FeatureTensor::new(dims, v.iter().map(|&x| x as f64).collect()).expect("finite"));
        }
        c
    }

    pub fn from_container(cfg: &ToyLmConfig, c: &TensorContainer) -> Result<Self> {
        let mut set = LoraSet {
            layers: (0..cfg.layers)
                .map(|_| LoraLayer {
                    q: LoraAdapter::zeros(cfg.embed_dim, cfg.lora_rank, cfg.lora_alpha),
                    v: LoraAdapter::zeros(cfg.embed_dim, cfg.lora_rank, cfg.lora_alpha),
                })
                .collect(),
        };
        let names: Vec<(String, Vec<usize>)> = set.tensors().into_iter().map(|(n, d, _)| (n, d)).collect();
        for ((name, dims), slot) in names.iter().zip(set.tensors_mut()) {
            let t = c.require(name)?;
            if t.dims() != &dims[..] {
                return Err(Error::Shape(format!("{name}: expected {dims:?}, found {:?}", t.dims())));
            }
            for (s, &v) in slot.iter_mut().zip(t.data()) {
                *s = v as f32;
            }
        }
        Ok(set)
    }
}

/// Base model plus optional adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub base: BaseLm,
    pub lora: Option<LoraSet>,
    rope: RopeTable,
}

#[derive(Debug, Clone, PartialEq)]
struct RopeTable {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    fn new(head_dim: usize, context: usize, base: f32) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(context * half);
        let mut sin = Vec::with_capacity(context * half);
        for p in 0..context {
            for i in 0..half {
                let theta = (p as f64) * (base as f64).powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(theta.cos() as f32);
                sin.push(theta.sin() as f32);
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates each head's `(2i, 2i+1)` pairs of row `pos`; `sign = -1`
    /// applies the inverse rotation.
    fn rotate_row(&self, row: &mut [f32], pos: usize, head_dim: usize, sign: f32) {
        let c = &self.cos[pos * self.half..(pos + 1) * self.half];
        let s = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_exact_mut(head_dim) {
            for i in 0..self.half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let sn = sign * s[i];
                head[2 * i] = a * c[i] - b * sn;
                head[2 * i + 1] = a * sn + b * c[i];
            }
        }
    }
}

/// Activations kept for the backward pass.
pub struct LayerCache {
    x: Vec<f32>,
    inv1: Vec<f32>,
    h1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    uq: Vec<f32>,
    uv: Vec<f32>,
    probs: Vec<f32>,
    attn: Vec<f32>,
    x_mid: Vec<f32>,
    inv2: Vec<f32>,
    h2: Vec<f32>,
    up: Vec<f32>,
    act: Vec<f32>,
}

pub struct ForwardCache {
    len: usize,
    layers: Vec<LayerCache>,
    x_final: Vec<f32>,
    rows: Vec<usize>,
    inv_f: Vec<f32>,
    hf: Vec<f32>,
}

/// Gradients produced by [`Backbone::backward`].
pub struct BackboneGrads {
    pub base: Option<BaseLm>,
    pub lora: Option<LoraSet>,
}

fn rms_forward(x: &[f32], gain: &[f32], e: usize) -> (Vec<f32>, Vec<f32>) {
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / e);
    for (row, dst) in x.chunks_exact(e).zip(out.chunks_exact_mut(e)) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / e as f32;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        inv.push(r);
        for ((d, v), g) in dst.iter_mut().zip(row).zip(gain) {
            *d = v * r * g;
        }
    }
    (out, inv)
}

/// Returns `dx` and accumulates the gain gradient when requested.
fn rms_backward(x: &[f32], inv: &[f32], gain: &[f32], dy: &[f32], e: usize, dgain: Option<&mut [f32]>) -> Vec<f32> {
    let mut dx = vec![0.0; x.len()];
    let mut dg_acc = dgain;
    for (((row, dyr), dxr), &r) in x.chunks_exact(e).zip(dy.chunks_exact(e)).zip(dx.chunks_exact_mut(e)).zip(inv) {
        let mut dot = 0.0f32;
        for i in 0..e {
            let n = row[i] * r;
            let dn = dyr[i] * gain[i];
            dot += dn * n;
            if let Some(dg) = dg_acc.as_deref_mut() {
                dg[i] += dyr[i] * n;
            }
        }
        let mean = dot / e as f32;
        for i in 0..e {
            let n = row[i] * r;
            dxr[i] = r * (dyr[i] * gain[i] - n * mean);
        }
    }
    dx
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// `y[n x out] (+)= x[n x in] * W^T` for `W` stored `[out x in]`.
fn linear(x: &[f32], n: usize, w: &[f32], out_dim: usize, in_dim: usize, beta: f32, y: &mut [f32]) {
    gemm(1.0, View::new(x, n, in_dim), View::new(w, out_dim, in_dim).t(), beta, ViewMut::new(y, n, out_dim));
}

impl Backbone {
    pub fn new(base: BaseLm, lora: Option<LoraSet>) -> Self {
        let cfg = &base.cfg;
        let rope = RopeTable::new(cfg.head_dim(), cfg.context, cfg.rope_base);
        Self { base, lora, rope }
    }

    pub fn cfg(&self) -> &ToyLmConfig {
        &self.base.cfg
    }

    fn lora_layer(&self, i: usize) -> Option<&LoraLayer> {
        self.lora.as_ref().map(|l| &l.layers[i])
    }

    /// Full forward pass over `x0` (`[len x E]`). Logits are computed only
    /// at `logit_rows`, returned as `[rows x V]`.
    pub fn forward(&self, x0: &[f32], len: usize, logit_rows: &[usize]) -> Result<(Vec<f32>, ForwardCache)> {
        let cfg = self.cfg();
        let (e, f, nh, dh) = (cfg.embed_dim, cfg.mlp_dim(), cfg.heads, cfg.head_dim());
        if len > cfg.context {
            return Err(Error::ContextOverflow { needed: len, context: cfg.context });
        }
        assert_eq!(x0.len(), len * e);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut x = x0.to_vec();
        let mut caches = Vec::with_capacity(cfg.layers);
        for (li, layer) in self.base.layers.iter().enumerate() {
            let (h1, inv1) = rms_forward(&x, &layer.attn_norm, e);
            let mut q = vec![0.0; len * e];
            let mut k = vec![0.0; len * e];
            let mut v = vec![0.0; len * e];
            linear(&h1, len, &layer.wq, e, e, 0.0, &mut q);
            linear(&h1, len, &layer.wk, e, e, 0.0, &mut k);
            linear(&h1, len, &layer.wv, e, e, 0.0, &mut v);
            let (mut uq, mut uv) = (Vec::new(), Vec::new());
            if let Some(lo) = self.lora_layer(li) {
                for (ad, u, out) in [(&lo.q, &mut uq, &mut q), (&lo.v, &mut uv, &mut v)] {
                    let r = ad.rank;
                    *u = vec![0.0; len * r];
                    linear(&h1, len, &ad.a, r, e, 0.0, u);
                    gemm(ad.scale(), View::new(u, len, r), View::new(&ad.b, e, r).t(), 1.0, ViewMut::new(out, len, e));
                }
            }
            for p in 0..len {
                self.rope.rotate_row(&mut q[p * e..(p + 1) * e], p, dh, 1.0);
                self.rope.rotate_row(&mut k[p * e..(p + 1) * e], p, dh, 1.0);
            }
            let mut probs = vec![0.0; nh * len * len];
            let mut attn = vec![0.0; len * e];
            for h in 0..nh {
                let p = &mut probs[h * len * len..(h + 1) * len * len];
                gemm(
                    scale,
                    View::cols_of(&q, len, e, h * dh, dh),
                    View::cols_of(&k, len, e, h * dh, dh).t(),
                    0.0,
                    ViewMut::new(p, len, len),
                );
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    let max = row[..=i].iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0;
                    for s in row[..=i].iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for s in row[..=i].iter_mut() {
                        *s /= sum;
                    }
                    row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
                }
                gemm(
                    1.0,
                    View::new(p, len, len),
                    View::cols_of(&v, len, e, h * dh, dh),
                    0.0,
                    ViewMut::cols_of(&mut attn, len, e, h * dh, dh),
                );
            }
            let mut x_mid = x.clone();
            linear(&attn, len, &layer.wo, e, e, 1.0, &mut x_mid);
            let (h2, inv2) = rms_forward(&x_mid, &layer.mlp_norm, e);
            let mut up = vec![0.0; len * f];
            linear(&h2, len, &layer.w_up, f, e, 0.0, &mut up);
            let act: Vec<f32> = up.iter().map(|&z| silu(z)).collect();
            let mut x_out = x_mid.clone();
            linear(&act, len, &layer.w_down, e, f, 1.0, &mut x_out);
            caches.push(LayerCache {
                x: std::mem::replace(&mut x, x_out),
                inv1,
                h1,
                q,
                k,
                v,
                uq,
                uv,
                probs,
                attn,
                x_mid,
                inv2,
                h2,
                up,
                act,
            });
        }
        let gathered: Vec<f32> = logit_rows.iter().flat_map(|&r| x[r * e..(r + 1) * e].iter().copied()).collect();
        let (hf, inv_f) = rms_forward(&gathered, &self.base.final_norm, e);
        let n = logit_rows.len();
        let vsz = cfg.vocab_size;
        let mut logits = vec![0.0; n * vsz];
        linear(&hf, n, &self.base.lm_head, vsz, e, 0.0, &mut logits);
        Ok((logits, ForwardCache { len, layers: caches, x_final: x, rows: logit_rows.to_vec(), inv_f, hf }))
    }

    /// Logits at every position, `[len x V]`.
    pub fn logits(&self, x0: &[f32], len: usize) -> Result<Vec<f32>> {
        let rows: Vec<usize> = (0..len).collect();
        Ok(self.forward(x0, len, &rows)?.0)
    }

    pub fn zero_grads(&self, train_base: bool) -> BackboneGrads {
        BackboneGrads {
            base: train_base.then(|| self.base.zeros_like()),
            lora: self.lora.as_ref().map(LoraSet::zeros_like),
        }
    }

    /// Backpropagates `dlogits` (`[rows x V]`), accumulating into `grads`.
    /// Base weights get gradients only when `grads.base` is present.
    /// Returns the gradient with respect to the input embeddings.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f32], grads: &mut BackboneGrads) -> Vec<f32> {
        let cfg = self.cfg();
        let (e, f, nh, dh, vsz) = (cfg.embed_dim, cfg.mlp_dim(), cfg.heads, cfg.head_dim(), cfg.vocab_size);
        let len = cache.len;
        let n = cache.rows.len();
        let scale = 1.0 / (dh as f32).sqrt();

        let mut dhf = vec![0.0; n * e];
        gemm(1.0, View::new(dlogits, n, vsz), View::new(&self.base.lm_head, vsz, e), 0.0, ViewMut::new(&mut dhf, n, e));
        if let Some(g) = grads.base.as_mut() {
            gemm(1.0, View::new(dlogits, n, vsz).t(), View::new(&cache.hf, n, e), 1.0, ViewMut::new(&mut g.lm_head, vsz, e));
        }
        let gathered: Vec<f32> = cache.rows.iter().flat_map(|&r| cache.x_final[r * e..(r + 1) * e].iter().copied()).collect();
        let dgath = rms_backward(
            &gathered,
            &cache.inv_f,
            &self.base.final_norm,
            &dhf,
            e,
            grads.base.as_mut().map(|g| &mut g.final_norm[..]),
        );
        let mut dx = vec![0.0; len * e];
        for (i, &r) in cache.rows.iter().enumerate() {
            for (d, s) in dx[r * e..(r + 1) * e].iter_mut().zip(&dgath[i * e..(i + 1) * e]) {
                *d += s;
            }
        }

        for (li, (layer, c)) in self.base.layers.iter().zip(&cache.layers).enumerate().rev() {
            let mut gbase = grads.base.as_mut().map(|g| &mut g.layers[li]);
            // MLP
            let mut dact = vec![0.0; len * f];
            gemm(1.0, View::new(&dx, len, e), View::new(&layer.w_down, e, f), 0.0, ViewMut::new(&mut dact, len, f));
            if let Some(g) = gbase.as_deref_mut() {
                gemm(1.0, View::new(&dx, len, e).t(), View::new(&c.act, len, f), 1.0, ViewMut::new(&mut g.w_down, e, f));
            }
            let dup: Vec<f32> = dact.iter().zip(&c.up).map(|(d, &z)| d * silu_grad(z)).collect();
            let mut dh2 = vec![0.0; len * e];
            gemm(1.0, View::new(&dup, len, f), View::new(&layer.w_up, f, e), 0.0, ViewMut::new(&mut dh2, len, e));
            if let Some(g) = gbase.as_deref_mut() {
                gemm(1.0, View::new(&dup, len, f).t(), View::new(&c.h2, len, e), 1.0, ViewMut::new(&mut g.w_up, f, e));
            }
            let dmid = rms_backward(&c.x_mid, &c.inv2, &layer.mlp_norm, &dh2, e, gbase.as_deref_mut().map(|g| &mut g.mlp_norm[..]));
            dx.iter_mut().zip(&dmid).for_each(|(a, b)| *a += b);

            // Attention output projection
            let mut dattn = vec![0.0; len * e];
            gemm(1.0, View::new(&dx, len, e), View::new(&layer.wo, e, e), 0.0, ViewMut::new(&mut dattn, len, e));
            if let Some(g) = gbase.as_deref_mut() {
                gemm(1.0, View::new(&dx, len, e).t(), View::new(&c.attn, len, e), 1.0, ViewMut::new(&mut g.wo, e, e));
            }
            let mut dq = vec![0.0; len * e];
            let mut dk = vec![0.0; len * e];
            let mut dv = vec![0.0; len * e];
            let mut dp = vec![0.0; len * len];
            for h in 0..nh {
                let p = &c.probs[h * len * len..(h + 1) * len * len];
                let dout = View::cols_of(&dattn, len, e, h * dh, dh);
                gemm(1.0, View::new(p, len, len).t(), dout, 0.0, ViewMut::cols_of(&mut dv, len, e, h * dh, dh));
                gemm(1.0, dout, View::cols_of(&c.v, len, e, h * dh, dh).t(), 0.0, ViewMut::new(&mut dp, len, len));
                for i in 0..len {
                    let prow = &p[i * len..=i * len + i];
                    let drow = &mut dp[i * len..(i + 1) * len];
                    let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pv) in drow[..=i].iter_mut().zip(prow) {
                        *d = pv * (*d - dot);
                    }
                    drow[i + 1..].iter_mut().for_each(|d| *d = 0.0);
                }
                gemm(
                    scale,
                    View::new(&dp, len, len),
                    View::cols_of(&c.k, len, e, h * dh, dh),
                    0.0,
                    ViewMut::cols_of(&mut dq, len, e, h * dh, dh),
                );
                gemm(
                    scale,
                    View::new(&dp, len, len).t(),
                    View::cols_of(&c.q, len, e, h * dh, dh),
                    0.0,
                    ViewMut::cols_of(&mut dk, len, e, h * dh, dh),
                );
            }
            for p in 0..len {
                self.rope.rotate_row(&mut dq[p * e..(p + 1) * e], p, dh, -1.0);
                self.rope.rotate_row(&mut dk[p * e..(p + 1) * e], p, dh, -1.0);
            }
            let mut dh1 = vec![0.0; len * e];
            for (w, d) in [(&layer.wq, &dq), (&layer.wk, &dk), (&layer.wv, &dv)] {
                gemm(1.0, View::new(d, len, e), View::new(w, e, e), 1.0, ViewMut::new(&mut dh1, len, e));
            }
            if let Some(g) = gbase.as_deref_mut() {
                for (gw, d) in [(&mut g.wq, &dq), (&mut g.wk, &dk), (&mut g.wv, &dv)] {
                    gemm(1.0, View::new(d, len, e).t(), View::new(&c.h1, len, e), 1.0, ViewMut::new(gw, e, e));
                }
            }
            if let (Some(lo), Some(gl)) = (self.lora_layer(li), grads.lora.as_mut()) {
                let gl = &mut gl.layers[li];
                for (ad, gad, u, d) in [(&lo.q, &mut gl.q, &c.uq, &dq), (&lo.v, &mut gl.v, &c.uv, &dv)] {
                    let r = ad.rank;
                    let s = ad.scale();
                    // y += s * u B^T with u = h1 A^T
                    gemm(s, View::new(d, len, e).t(), View::new(u, len, r), 1.0, ViewMut::new(&mut gad.b, e, r));
                    let mut du = vec![0.0; len * r];
                    gemm(s, View::new(d, len, e), View::new(&ad.b, e, r), 0.0, ViewMut::new(&mut du, len, r));
                    gemm(1.0, View::new(&du, len, r).t(), View::new(&c.h1, len, e), 1.0, ViewMut::new(&mut gad.a, r, e));
                    gemm(1.0, View::new(&du, len, r), View::new(&ad.a, r, e), 1.0, ViewMut::new(&mut dh1, len, e));
                }
            }
            let dxin = rms_backward(&c.x, &c.inv1, &layer.attn_norm, &dh1, e, gbase.map(|g| &mut g.attn_norm[..]));
            dx.iter_mut().zip(&dxin).for_each(|(a, b)| *a += b);
        }
        dx
    }

    /// Runs the prompt and returns the logits of its last position together
    /// with a key/value cache for incremental decoding.
    pub fn prefill(&self, x0: &[f32], len: usize) -> Result<(Vec<f32>, KvCache)> {
        if len == 0 {
            return Err(Error::EmptySequence);
        }
        let (logits, cache) = self.forward(x0, len, &[len - 1])?;
        let e = self.cfg().embed_dim;
        let ctx = self.cfg().context;
        let mut kv = KvCache { len, keys: Vec::new(), values: Vec::new() };
        for c in cache.layers {
            let mut k = c.k;
            let mut v = c.v;
            k.resize(ctx * e, 0.0);
            v.resize(ctx * e, 0.0);
            kv.keys.push(k);
            kv.values.push(v);
        }
        Ok((logits, kv))
    }

    /// Appends one input embedding and returns the logits at its position.
    pub fn step(&self, x_row: &[f32], kv: &mut KvCache) -> Result<Vec<f32>> {
        let cfg = self.cfg();
        let (e, f, nh, dh, vsz) = (cfg.embed_dim, cfg.mlp_dim(), cfg.heads, cfg.head_dim(), cfg.vocab_size);
        let pos = kv.len;
        if pos >= cfg.context {
            return Err(Error::ContextOverflow { needed: pos + 1, context: cfg.context });
        }
        let scale = 1.0 / (dh as f32).sqrt();
        let mut x = x_row.to_vec();
        for (li, layer) in self.base.layers.iter().enumerate() {
            let (h1, _) = rms_forward(&x, &layer.attn_norm, e);
            let mut q = vec![0.0; e];
            let mut k = vec![0.0; e];
            let mut v = vec![0.0; e];
            linear(&h1, 1, &layer.wq, e, e, 0.0, &mut q);
            linear(&h1, 1, &layer.wk, e, e, 0.0, &mut k);
            linear(&h1, 1, &layer.wv, e, e, 0.0, &mut v);
            if let Some(lo) = self.lora_layer(li) {
                for (ad, out) in [(&lo.q, &mut q), (&lo.v, &mut v)] {
                    let r = ad.rank;
                    let mut u = vec![0.0; r];
                    linear(&h1, 1, &ad.a, r, e, 0.0, &mut u);
                    gemm(ad.scale(), View::new(&u, 1, r), View::new(&ad.b, e, r).t(), 1.0, ViewMut::new(out, 1, e));
                }
            }
            self.rope.rotate_row(&mut q, pos, dh, 1.0);
            self.rope.rotate_row(&mut k, pos, dh, 1.0);
            kv.keys[li][pos * e..(pos + 1) * e].copy_from_slice(&k);
            kv.values[li][pos * e..(pos + 1) * e].copy_from_slice(&v);
            let n = pos + 1;
            let mut attn = vec![0.0; e];
            let mut scores = vec![0.0; n];
            for h in 0..nh {
                gemm(
                    scale,
                    View::cols_of(&q, 1, e, h * dh, dh),
                    View::cols_of(&kv.keys[li], n, e, h * dh, dh).t(),
                    0.0,
                    ViewMut::new(&mut scores, 1, n),
                );
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                scores.iter_mut().for_each(|s| *s /= sum);
                gemm(
                    1.0,
                    View::new(&scores, 1, n),
                    View::cols_of(&kv.values[li], n, e, h * dh, dh),
                    0.0,
                    ViewMut::cols_of(&mut attn, 1, e, h * dh, dh),
                );
            }
            linear(&attn, 1, &layer.wo, e, e, 1.0, &mut x);
            let (h2, _) = rms_forward(&x, &layer.mlp_norm, e);
            let mut up = vec![0.0; f];
            linear(&h2, 1, &layer.w_up, f, e, 0.0, &mut up);
            up.iter_mut().for_each(|z| *z = silu(*z));
            linear(&up, 1, &layer.w_down, e, f, 1.0, &mut x);
        }
        kv.len += 1;
        let (hf, _) = rms_forward(&x, &self.base.final_norm, e);
        let mut logits = vec![0.0; vsz];
        linear(&hf, 1, &self.base.lm_head, vsz, e, 0.0, &mut logits);
        Ok(logits)
    }

    /// Token embedding row.
    pub fn embed_token(&self, id: u32) -> &[f32] {
        let e = self.cfg().embed_dim;
        &self.base.tok_emb[id as usize * e..(id as usize + 1) * e]
    }
}

/// Keys (after rotation) and values of every processed position.
pub struct KvCache {
    len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

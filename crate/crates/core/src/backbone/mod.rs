//! Toy decoder backbone, optimizer, curriculum trainers and decoding.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, meta_path, save_checkpoint, CheckpointMeta};
pub use model::{lora_forward, Backbone, BackboneGrads, BaseLm, ForwardCache, KvCache, Layer, LoraAdapter, LoraLayer, LoraSet};
pub use train::{
    corpus_texts, pretrain_base, train_stage1, train_stage2, EmotionModel, Instance, PreparedSample, StageData, TrainReport,
};

use serde::{Deserialize, Serialize};

use crate::adapter::{Element, TokenSequence};
use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, ANSWER_CLOSE, ANSWER_OPEN, THINK_CLOSE, THINK_OPEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLmConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub context: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Taken from the tokenizer when left at 0.
    pub vocab_size: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub rope_base: f32,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            embed_dim: 256,
            context: 512,
            mlp_ratio: 4,
            vocab_size: 0,
            lora_rank: 8,
            lora_alpha: 16.0,
            rope_base: 10000.0,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 || self.context == 0 || self.mlp_ratio == 0 {
            return bad("model sizes must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even for rotary positions", self.head_dim()));
        }
        if self.vocab_size == 0 {
            return bad("vocab_size is unset".into());
        }
        if self.lora_rank == 0 || !self.lora_alpha.is_finite() {
            return bad("lora_rank must be positive and lora_alpha finite".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Length of the learning-rate schedule, both stages together.
    pub total_steps: usize,
    /// Steps run by stage 1; stage 2 runs the remainder.
    pub stage1_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub stage: u8,
    /// Fraction of stage-2 batch items that are recognition samples.
    pub stage2_mix: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Text-only pretraining of the base model.
    pub base_steps: usize,
    pub base_lr: f64,
    pub base_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            stage1_steps: 1000,
            warmup_steps: 100,
            peak_lr: 1e-4,
            weight_decay: 0.05,
            batch_size: 4,
            seed: 0,
            stage: 1,
            stage2_mix: 0.5,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            base_steps: 600,
            base_lr: 3e-3,
            base_batch_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be smaller than total_steps");
        }
        if self.stage1_steps > self.total_steps {
            return bad("stage1_steps exceeds total_steps");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) || !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.stage2_mix) {
            return bad("stage2_mix must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.base_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !matches!(self.stage, 1 | 2) {
            return bad("stage must be 1 or 2");
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be non-negative");
        }
        Ok(())
    }

    /// Global step range run by a stage.
    pub fn stage_range(&self, stage: u8) -> std::ops::Range<usize> {
        match stage {
            1 => 0..self.stage1_steps,
            _ => self.stage1_steps..self.total_steps,
        }
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return cfg.peak_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Floating-point parameter storage accepted by [`AdamW`].
pub trait Param: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Param for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Param for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// AdamW with decoupled weight decay. Moments are kept in f64 and indexed
/// by the order tensors are passed to [`AdamW::update`] within a step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    cursor: usize,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            moments: Vec::new(),
            cursor: 0,
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
        self.cursor = 0;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates one tensor. `decay` selects weight decay (matrices only).
    pub fn update<P: Param>(&mut self, param: &mut [P], grad: &[P], lr: f64, decay: bool) {
        assert_eq!(param.len(), grad.len());
        if self.cursor == self.moments.len() {
            self.moments.push((vec![0.0; param.len()], vec![0.0; param.len()]));
        }
        let (m, v) = &mut self.moments[self.cursor];
        assert_eq!(m.len(), param.len(), "tensor order changed between steps");
        self.cursor += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let wd = if decay { self.weight_decay } else { 0.0 };
        for i in 0..param.len() {
            let g = grad[i].to_f64();
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let p = param[i].to_f64();
            param[i] = P::from_f64(p - lr * (mhat / (vhat.sqrt() + self.eps) + wd * p));
        }
    }
}

/// Mean softmax cross-entropy of `targets` under row-wise logits `[n x V]`,
/// and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f32], vocab: usize, targets: &[u32]) -> (f64, Vec<f32>) {
    let n = targets.len();
    assert_eq!(logits.len(), n * vocab);
    let mut total = 0.0;
    let mut grad = vec![0.0f32; logits.len()];
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * vocab..(i + 1) * vocab];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
        let sum: f64 = row.iter().map(|&z| (z as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t as usize] as f64;
        for (g, &z) in grad[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
            *g = ((z as f64 - lse).exp() / n as f64) as f32;
        }
        grad[i * vocab + t as usize] -= 1.0 / n as f32;
    }
    (total / n as f64, grad)
}

/// Logit rows and next-token targets for the response span of a sequence.
pub fn response_targets(seq: &TokenSequence) -> Result<(Vec<usize>, Vec<u32>)> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for j in seq.response_positions() {
        let Element::Text(id) = seq.elements[j] else {
            return Err(Error::MalformedTarget("response spans must be text".into()));
        };
        if j == 0 {
            return Err(Error::MalformedTarget("response cannot start the sequence".into()));
        }
        rows.push(j - 1);
        targets.push(id);
    }
    if rows.is_empty() {
        return Err(Error::EmptyResponse);
    }
    Ok((rows, targets))
}

/// Mean cross-entropy over response tokens, given logits at every position
/// (`[len x V]`). Prompt positions do not contribute.
pub fn loss(seq: &TokenSequence, logits: &[f32], vocab: usize) -> Result<f64> {
    if logits.len() != seq.len() * vocab {
        return Err(Error::Shape(format!("expected {} logits, got {}", seq.len() * vocab, logits.len())));
    }
    let (rows, targets) = response_targets(seq)?;
    let gathered: Vec<f32> = rows.iter().flat_map(|&r| logits[r * vocab..(r + 1) * vocab].iter().copied()).collect();
    Ok(cross_entropy(&gathered, vocab, &targets).0)
}

/// Input embeddings of a sequence as a `[len x E]` f32 matrix.
pub fn embed_sequence(backbone: &Backbone, seq: &TokenSequence) -> Result<Vec<f32>> {
    let e = backbone.cfg().embed_dim;
    let mut x0 = Vec::with_capacity(seq.len() * e);
    for el in &seq.elements {
        match *el {
            Element::Text(id) => {
                if id as usize >= backbone.cfg().vocab_size {
                    return Err(Error::InvalidArgument(format!("token id {id} outside the vocabulary")));
                }
                x0.extend_from_slice(backbone.embed_token(id));
            }
            Element::Embedding { stream, row } => {
                let v = seq.embedding(stream, row);
                if v.len() != e {
                    return Err(Error::Shape(format!("{} embedding has width {}, expected {e}", stream.name(), v.len())));
                }
                x0.extend(v.iter().map(|&x| x as f32));
            }
        }
    }
    Ok(x0)
}

/// Embedding positions grouped per stream, in element order.
pub(crate) fn stream_positions(seq: &TokenSequence) -> [Vec<(usize, usize)>; 4] {
    let mut out: [Vec<(usize, usize)>; 4] = Default::default();
    for (pos, el) in seq.elements.iter().enumerate() {
        if let Element::Embedding { stream, row } = *el {
            out[stream.index()].push((pos, row));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub raw: String,
    pub token_ids: Vec<u32>,
    pub think: Option<String>,
    pub answer: Option<String>,
    /// Set when the text has an unclosed or badly nested tag.
    pub malformed: bool,
    /// Both `<think>` and `<answer>` spans present and well nested.
    pub tagged: bool,
}

impl GenerationResult {
    pub fn from_text(raw: String, token_ids: Vec<u32>) -> Self {
        match parse_answer(&raw) {
            Ok(p) => Self {
                tagged: p.tagged && p.think.is_some() && p.answer.as_deref().is_some_and(|a| !a.is_empty()),
                think: p.think,
                answer: p.answer,
                malformed: false,
                raw,
                token_ids,
            },
            Err(_) => Self { raw, token_ids, think: None, answer: None, malformed: true, tagged: false },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub think: Option<String>,
    pub answer: Option<String>,
    /// The answer came from an `<answer>` span.
    pub tagged: bool,
}

fn tag_span<'a>(text: &'a str, open: &str, close: &str) -> Result<Option<(usize, usize, &'a str)>> {
    let Some(start) = text.find(open) else {
        if text.contains(close) {
            return Err(Error::MalformedFormat(format!("{close} without {open}")));
        }
        return Ok(None);
    };
    let body = start + open.len();
    let Some(rel) = text[body..].find(close) else {
        return Err(Error::MalformedFormat(format!("unclosed {open}")));
    };
    let inner = &text[body..body + rel];
    if inner.contains(open) || text[..start].contains(close) {
        return Err(Error::MalformedFormat(format!("badly nested {open}")));
    }
    Ok(Some((start, body + rel + close.len(), inner)))
}

/// Extracts the answer (trimmed, lowercased) and the optional reasoning.
/// Text without answer tags is taken whole as the answer.
pub fn parse_answer(text: &str) -> Result<ParsedAnswer> {
    let think = tag_span(text, THINK_OPEN, THINK_CLOSE)?;
    let answer = tag_span(text, ANSWER_OPEN, ANSWER_CLOSE)?;
    if let (Some((ts, te, _)), Some((as_, ae, _))) = (think, answer) {
        if ts < ae && as_ < te {
            return Err(Error::MalformedFormat("think and answer spans overlap".into()));
        }
    }
    let think_text = think.map(|(_, _, t)| t.trim().to_string());
    match answer {
        Some((_, _, a)) => Ok(ParsedAnswer { think: think_text, answer: Some(a.trim().to_lowercase()), tagged: true }),
        None => {
            if think.is_some() {
                return Ok(ParsedAnswer { think: think_text, answer: None, tagged: false });
            }
            let t = text.trim().to_lowercase();
            Ok(ParsedAnswer { think: None, answer: (!t.is_empty()).then_some(t), tagged: false })
        }
    }
}

/// Greedy decoding from a prompt until the end token or `max_tokens`.
pub fn generate(backbone: &Backbone, vocab: &Vocab, seq: &TokenSequence, max_tokens: usize) -> Result<GenerationResult> {
    if max_tokens == 0 {
        return Ok(GenerationResult::from_text(String::new(), Vec::new()));
    }
    let x0 = embed_sequence(backbone, seq)?;
    let (mut logits, mut kv) = backbone.prefill(&x0, seq.len())?;
    let eos = vocab.eos();
    let mut ids = Vec::new();
    loop {
        let next = argmax(&logits);
        if next == eos {
            break;
        }
        ids.push(next);
        if ids.len() == max_tokens {
            break;
        }
        logits = backbone.step(backbone.embed_token(next), &mut kv)?;
    }
    Ok(GenerationResult::from_text(vocab.decode(&ids), ids))
}

fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

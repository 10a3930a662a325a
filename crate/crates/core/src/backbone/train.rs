//! The full model (token pipeline, pre-fusion, adapters, backbone) and the
//! base pretraining and two curriculum stages.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Backbone, BackboneGrads, BaseLm, LoraSet};
use super::{
    cross_entropy, embed_sequence, generate, lr_at, parse_answer, response_targets, stream_positions, AdamW,
    GenerationResult, ToyLmConfig, TrainConfig,
};
use crate::adapter::{assemble_prompt, AdapterSet, PromptBundle, Stream, TokenSequence, SAYS_PREFIX};
use crate::error::{Error, Result};
use crate::formats::{self, SampleRecord, TaskKind, TraceRecord};
use crate::prefusion::{FuseTape, PreFusionConfig, PreFusionParams};
use crate::synthgen::{prompt_pool, sample_instruction, STAR};
use crate::tensor::FeatureTensor;
use crate::token_pipeline::{tokenize_streams, ModalityTokens, PipelineConfig};
use crate::tokenizer::Vocab;

/// RNG stream ids derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_BASE: u64 = 1;
const STREAM_STAGE1: u64 = 2;
const STREAM_STAGE2: u64 = 3;
const STREAM_LORA: u64 = 4;

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A sample after loading and tokenizing its feature files.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub tokens: ModalityTokens,
    pub transcript: String,
    pub label: String,
    pub reasoning_target: Option<String>,
}

impl PreparedSample {
    pub fn load(record: &SampleRecord, pipeline: &PipelineConfig) -> Result<Self> {
        let audio = formats::load_tensor(&record.audio_path)?;
        let video = formats::load_tensor(&record.video_path)?;
        let global = formats::load_tensor(&record.global_path)?;
        Ok(Self {
            id: record.id.clone(),
            tokens: tokenize_streams(&audio, &video, &global, pipeline)?,
            transcript: record.transcript.clone(),
            label: record.label.clone(),
            reasoning_target: record.reasoning_target.clone(),
        })
    }

    /// Supervised response for a task.
    pub fn target(&self, task: TaskKind) -> Result<&str> {
        match task {
            TaskKind::Recognition => Ok(&self.label),
            TaskKind::Reasoning => self
                .reasoning_target
                .as_deref()
                .ok_or_else(|| Error::MalformedTarget(format!("{} has no reasoning target", self.id))),
        }
    }
}

/// One training example: which sample and which task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instance {
    pub sample: usize,
    pub task: TaskKind,
}

/// Training data for one curriculum stage.
#[derive(Debug, Clone)]
pub struct StageData {
    pub samples: Vec<PreparedSample>,
    /// `None` for stage 1 (recognition only); the recognition share for stage 2.
    pub mix: Option<f64>,
    /// Fixed instance list for stage 1.
    pub instances: Vec<Instance>,
}

impl StageData {
    /// Stage-1 data: every sample as a recognition instance.
    pub fn recognition(samples: Vec<PreparedSample>) -> Result<Self> {
        let instances = (0..samples.len()).map(|sample| Instance { sample, task: TaskKind::Recognition }).collect();
        Self::from_instances(samples, instances)
    }

    /// Stage-1 data from an explicit instance list; every instance must be a
    /// recognition instance.
    pub fn from_instances(samples: Vec<PreparedSample>, instances: Vec<Instance>) -> Result<Self> {
        if samples.is_empty() || instances.is_empty() {
            return Err(Error::EmptyInput);
        }
        for inst in &instances {
            if inst.sample >= samples.len() {
                return Err(Error::InvalidArgument(format!("instance refers to sample {}", inst.sample)));
            }
            if inst.task != TaskKind::Recognition {
                return Err(Error::StageMismatch(format!(
                    "stage 1 trains recognition only, found a {} instance for {}",
                    inst.task.as_str(),
                    samples[inst.sample].id
                )));
            }
        }
        Ok(Self { samples, mix: None, instances })
    }

    /// Stage-2 data: each batch item is a recognition instance with
    /// probability `mix`, otherwise a reasoning instance.
    pub fn mixed(samples: Vec<PreparedSample>, mix: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        if !(0.0..=1.0).contains(&mix) {
            return Err(Error::InvalidArgument(format!("mix ratio {mix} outside [0, 1]")));
        }
        if mix < 1.0 {
            for s in &samples {
                let target = s.target(TaskKind::Reasoning)?;
                let ok = parse_answer(target).is_ok_and(|p| p.tagged && p.think.is_some());
                if !ok {
                    return Err(Error::MalformedTarget(format!(
                        "{}: reasoning target needs <think> and <answer> spans",
                        s.id
                    )));
                }
            }
        }
        Ok(Self { samples, mix: Some(mix), instances: Vec::new() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<TraceRecord>,
    pub trainable_parameters: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|r| r.loss)
    }
}

/// All learnable pieces plus the configuration they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionModel {
    pub pipeline: PipelineConfig,
    pub prefusion_cfg: PreFusionConfig,
    pub prefusion: PreFusionParams,
    pub adapters: AdapterSet,
    pub backbone: Backbone,
    pub vocab: Vocab,
    pub labels: Vec<String>,
    /// Feature widths of the audio, global and temporal streams.
    pub input_dims: [usize; 3],
}

/// Every text the model may see, used to build the vocabulary.
pub fn corpus_texts(records: &[SampleRecord], labels: &[String]) -> Vec<String> {
    let mut texts = vec![SAYS_PREFIX.to_string()];
    for task in [TaskKind::Recognition, TaskKind::Reasoning] {
        for p in prompt_pool(task) {
            texts.push(p.replace(STAR, &labels.join(", ")));
        }
    }
    texts.extend(labels.iter().cloned());
    for r in records {
        texts.push(r.transcript.clone());
        texts.extend(r.reasoning_target.iter().cloned());
    }
    texts
}

impl EmotionModel {
    /// Fresh model; the vocabulary comes from the corpus texts.
    pub fn init(
        pipeline: PipelineConfig,
        prefusion_cfg: PreFusionConfig,
        mut lm: ToyLmConfig,
        vocab: Vocab,
        labels: Vec<String>,
        input_dims: [usize; 3],
        seed: u64,
    ) -> Result<Self> {
        pipeline.validate()?;
        prefusion_cfg.validate()?;
        if prefusion_cfg.tokens != pipeline.audio_tokens || pipeline.temporal_tokens() != pipeline.audio_tokens {
            return Err(Error::Config(format!(
                "pre-fusion needs aligned streams: audio {} tokens, temporal {} tokens, fusion expects {}",
                pipeline.audio_tokens,
                pipeline.temporal_tokens(),
                prefusion_cfg.tokens
            )));
        }
        lm.vocab_size = vocab.len();
        lm.validate()?;
        let mut rng = seeded(seed, STREAM_INIT);
        let prefusion = PreFusionParams::init(&prefusion_cfg, input_dims, &mut rng)?;
        let [d_a, d_g, d_v] = input_dims;
        let adapters = AdapterSet::init([prefusion_cfg.dim, d_g, d_v, d_a], lm.embed_dim, &mut rng);
        let base = BaseLm::init(&lm, &mut rng)?;
        Ok(Self {
            pipeline,
            prefusion_cfg,
            prefusion,
            adapters,
            backbone: Backbone::new(base, None),
            vocab,
            labels,
            input_dims,
        })
    }

    /// Attaches fresh adapters (B = 0) to the backbone if none are present.
    pub fn attach_lora(&mut self, seed: u64) {
        if self.backbone.lora.is_none() {
            let mut rng = seeded(seed, STREAM_LORA);
            let lora = LoraSet::init(self.backbone.cfg(), &mut rng);
            self.backbone = Backbone::new(self.backbone.base.clone(), Some(lora));
        }
    }

    /// Trainable parameters of the curriculum stages (base weights excluded).
    pub fn trainable_parameters(&self) -> usize {
        self.prefusion.num_parameters()
            + self.adapters.num_parameters()
            + self.backbone.lora.as_ref().map_or(0, LoraSet::num_parameters)
    }

    fn stream_inputs<'a>(&self, tokens: &'a ModalityTokens, u_f: &'a FeatureTensor) -> [&'a FeatureTensor; 4] {
        [u_f, &tokens.image, &tokens.temporal, &tokens.audio]
    }

    /// Fuses and projects a sample's streams and lays out the prompt.
    pub fn encode(
        &self,
        tokens: &ModalityTokens,
        transcript: &str,
        task: TaskKind,
        instruction: &str,
    ) -> Result<(TokenSequence, FuseTape)> {
        let tape = FuseTape::forward(&tokens.audio, &tokens.global, &tokens.temporal, &self.prefusion)?;
        let inputs = self.stream_inputs(tokens, &tape.output.u_f);
        let proj = |s: Stream| self.adapters.map(s).project(inputs[s.index()]);
        let bundle = PromptBundle {
            fusion_tokens: Some(proj(Stream::Fusion)?),
            image_tokens: Some(proj(Stream::Image)?),
            video_tokens: Some(proj(Stream::Video)?),
            audio_tokens: Some(proj(Stream::Audio)?),
            transcript: transcript.to_string(),
            task_identifier: task.as_str().to_string(),
            instruction: instruction.to_string(),
        };
        Ok((assemble_prompt(&bundle, &self.vocab)?, tape))
    }

    /// Instruction for a sample at evaluation time, drawn from a stream that
    /// depends only on `seed` and the sample position.
    pub fn eval_instruction(&self, task: TaskKind, seed: u64, position: usize) -> String {
        let mut rng = seeded(seed, (1 << 40) | position as u64);
        sample_instruction(task, &self.labels, &mut rng)
    }

    /// Greedy generation for one sample.
    pub fn predict(
        &self,
        sample: &PreparedSample,
        task: TaskKind,
        instruction: &str,
        max_tokens: usize,
    ) -> Result<GenerationResult> {
        let (seq, _) = self.encode(&sample.tokens, &sample.transcript, task, instruction)?;
        generate(&self.backbone, &self.vocab, &seq, max_tokens)
    }

    /// Text-only prompt: the template with every feature stream disabled.
    fn text_prompt(&self, sample: &PreparedSample, task: TaskKind, instruction: &str) -> Result<TokenSequence> {
        let bundle = PromptBundle {
            fusion_tokens: None,
            image_tokens: None,
            video_tokens: None,
            audio_tokens: None,
            transcript: sample.transcript.clone(),
            task_identifier: task.as_str().to_string(),
            instruction: instruction.to_string(),
        };
        assemble_prompt(&bundle, &self.vocab)
    }

    fn response_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = self.vocab.encode(text);
        ids.push(self.vocab.eos());
        ids
    }
}

struct StageGrads {
    prefusion: PreFusionParams,
    adapters: AdapterSet,
    backbone: BackboneGrads,
}

impl StageGrads {
    fn lora(&mut self) -> &mut LoraSet {
        self.backbone.lora.as_mut().expect("adapters attached")
    }
}

/// Forward and backward for one instance; returns the loss. Gradients are
/// scaled by `weight` before accumulation.
fn instance_grad(
    model: &EmotionModel,
    sample: &PreparedSample,
    task: TaskKind,
    instruction: &str,
    weight: f32,
    grads: &mut StageGrads,
) -> Result<f64> {
    let (mut seq, tape) = model.encode(&sample.tokens, &sample.transcript, task, instruction)?;
    seq.push_response(&model.response_ids(sample.target(task)?));
    let (rows, targets) = response_targets(&seq)?;
    let x0 = embed_sequence(&model.backbone, &seq)?;
    let (logits, cache) = model.backbone.forward(&x0, seq.len(), &rows)?;
    let (loss, mut dlogits) = cross_entropy(&logits, model.backbone.cfg().vocab_size, &targets);
    dlogits.iter_mut().for_each(|g| *g *= weight);
    let dx = model.backbone.backward(&cache, &dlogits, &mut grads.backbone);

    let e = model.backbone.cfg().embed_dim;
    let inputs = model.stream_inputs(&sample.tokens, &tape.output.u_f);
    let positions = stream_positions(&seq);
    let mut d_fusion = None;
    for s in Stream::ALL {
        let pos = &positions[s.index()];
        let input = inputs[s.index()];
        let n = input.rows();
        let mut dy = vec![0.0f64; n * e];
        for &(p, row) in pos {
            for (d, &g) in dy[row * e..(row + 1) * e].iter_mut().zip(&dx[p * e..(p + 1) * e]) {
                *d += g as f64;
            }
        }
        let map = model.adapters.map(s);
        let grad_map = &mut grads.adapters.maps[s.index()];
        let dx_in = map.backward_rows(input.data(), &dy, n, grad_map);
        if s == Stream::Fusion {
            d_fusion = Some(FeatureTensor::new(input.dims().to_vec(), dx_in)?);
        }
    }
    let fg = tape.backward(&model.prefusion, &d_fusion.expect("fusion stream present"))?;
    for (acc, g) in grads.prefusion.tensors_mut().into_iter().zip(fg.params.tensors()) {
        acc.iter_mut().zip(g.2).for_each(|(a, b)| *a += b);
    }
    Ok(loss)
}

fn global_norm(grads: &mut StageGrads) -> f64 {
    let mut sq = 0.0;
    for t in grads.prefusion.tensors_mut().into_iter().chain(grads.adapters.tensors_mut()) {
        sq += t.iter().map(|v| v * v).sum::<f64>();
    }
    for t in grads.lora().tensors_mut() {
        sq += t.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    }
    sq.sqrt()
}

fn scale_grads(grads: &mut StageGrads, factor: f64) {
    for t in grads.prefusion.tensors_mut().into_iter().chain(grads.adapters.tensors_mut()) {
        t.iter_mut().for_each(|v| *v *= factor);
    }
    for t in grads.lora().tensors_mut() {
        t.iter_mut().for_each(|v| *v = (*v as f64 * factor) as f32);
    }
}

fn apply_update(model: &mut EmotionModel, grads: &mut StageGrads, opt: &mut AdamW, lr: f64, clip: f64) {
    if clip > 0.0 {
        let norm = global_norm(grads);
        if norm > clip {
            scale_grads(grads, clip / norm);
        }
    }
    opt.begin_step();
    let decay_pf: Vec<bool> = model.prefusion.tensors().iter().map(|(_, d, _)| d.len() >= 2).collect();
    for ((p, g), decay) in model.prefusion.tensors_mut().into_iter().zip(grads.prefusion.tensors_mut()).zip(decay_pf) {
        opt.update(p, g, lr, decay);
    }
    let decay_ad: Vec<bool> = model.adapters.tensors().iter().map(|(_, d, _)| d.len() >= 2).collect();
    for ((p, g), decay) in model.adapters.tensors_mut().into_iter().zip(grads.adapters.tensors_mut()).zip(decay_ad) {
        opt.update(p, g, lr, decay);
    }
    let lora = model.backbone.lora.as_mut().expect("adapters attached");
    for (p, g) in lora.tensors_mut().into_iter().zip(grads.lora().tensors_mut()) {
        opt.update(p, g, lr, true);
    }
}

/// Epoch-shuffled cursor over `0..n`.
struct Shuffler {
    order: Vec<usize>,
    next: usize,
}

impl Shuffler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), next: n }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.next == self.order.len() {
            self.order.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

fn run_stage(model: &mut EmotionModel, data: &StageData, cfg: &TrainConfig, stage: u8) -> Result<TrainReport> {
    cfg.validate()?;
    model.attach_lora(cfg.seed);
    let range = cfg.stage_range(stage);
    let mut rng = seeded(cfg.seed, if stage == 1 { STREAM_STAGE1 } else { STREAM_STAGE2 });
    let pool_len = if data.mix.is_some() { data.samples.len() } else { data.instances.len() };
    let mut shuffler = Shuffler::new(pool_len);
    let mut opt = AdamW::new(cfg);
    let mut trace = Vec::with_capacity(range.len());
    let weight = 1.0 / cfg.batch_size as f32;
    for step in range {
        let lr = lr_at(step, cfg);
        let mut grads = StageGrads {
            prefusion: model.prefusion.zeros_like(),
            adapters: model.adapters.zeros_like(),
            backbone: model.backbone.zero_grads(false),
        };
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let k = shuffler.draw(&mut rng);
            let inst = match data.mix {
                None => data.instances[k],
                Some(mix) => {
                    let task = if rng.random_bool(mix) { TaskKind::Recognition } else { TaskKind::Reasoning };
                    Instance { sample: k, task }
                }
            };
            let instruction = sample_instruction(inst.task, &model.labels, &mut rng);
            total += instance_grad(model, &data.samples[inst.sample], inst.task, &instruction, weight, &mut grads)?;
        }
        apply_update(model, &mut grads, &mut opt, lr, cfg.grad_clip);
        let loss = total / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!("loss diverged at step {step}")));
        }
        trace.push(TraceRecord { step, lr, loss });
        log::debug!("stage {stage} step {step} lr {lr:.3e} loss {loss:.5}");
    }
    Ok(TrainReport { trace, trainable_parameters: model.trainable_parameters() })
}

/// Stage 1: recognition only. Trains LoRA, pre-fusion and adapters; the base
/// model stays frozen.
pub fn train_stage1(model: &mut EmotionModel, data: &StageData, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.mix.is_some() {
        return Err(Error::StageMismatch("stage 1 received mixed recognition/reasoning data".into()));
    }
    run_stage(model, data, cfg, 1)
}

/// Stage 2: recognition and reasoning jointly, continuing from a stage-1
/// model with a fresh optimizer.
pub fn train_stage2(model: &mut EmotionModel, data: &StageData, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.mix.is_none() {
        return Err(Error::StageMismatch("stage 2 needs mixed data".into()));
    }
    if model.backbone.lora.is_none() {
        return Err(Error::StageMismatch("stage 2 must start from a stage-1 model".into()));
    }
    run_stage(model, data, cfg, 2)
}

/// Text-only language-model pretraining of the base weights on the corpus
/// templates (full next-token loss, feature streams disabled). Runs before
/// the curriculum; the base is frozen afterwards.
pub fn pretrain_base(model: &mut EmotionModel, samples: &[PreparedSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if model.backbone.lora.is_some() {
        return Err(Error::StageMismatch("base pretraining must precede the curriculum".into()));
    }
    let mut rng = seeded(cfg.seed, STREAM_BASE);
    let mut shuffler = Shuffler::new(samples.len());
    let mut opt = AdamW::new(cfg);
    let sched = TrainConfig {
        total_steps: cfg.base_steps,
        warmup_steps: (cfg.base_steps / 10).min(cfg.warmup_steps),
        peak_lr: cfg.base_lr,
        ..cfg.clone()
    };
    let mut trace = Vec::with_capacity(cfg.base_steps);
    let weight = 1.0 / cfg.base_batch_size as f32;
    let vocab_size = model.backbone.cfg().vocab_size;
    let e = model.backbone.cfg().embed_dim;
    for step in 0..cfg.base_steps {
        let lr = lr_at(step, &sched);
        let mut grads = model.backbone.zero_grads(true);
        let mut total = 0.0;
        for _ in 0..cfg.base_batch_size {
            let sample = &samples[shuffler.draw(&mut rng)];
            let has_reasoning = sample.reasoning_target.is_some();
            let task = if has_reasoning && rng.random_bool(0.5) { TaskKind::Reasoning } else { TaskKind::Recognition };
            let instruction = sample_instruction(task, &model.labels, &mut rng);
            let mut seq = model.text_prompt(sample, task, &instruction)?;
            seq.push_response(&model.response_ids(sample.target(task)?));
            let ids = seq.text_ids();
            let rows: Vec<usize> = (0..ids.len() - 1).collect();
            let x0 = embed_sequence(&model.backbone, &seq)?;
            let (logits, cache) = model.backbone.forward(&x0, seq.len(), &rows)?;
            let (loss, mut dlogits) = cross_entropy(&logits, vocab_size, &ids[1..]);
            dlogits.iter_mut().for_each(|g| *g *= weight);
            let dx = model.backbone.backward(&cache, &dlogits, &mut grads);
            let gb = grads.base.as_mut().expect("base gradients");
            for (p, &id) in ids.iter().enumerate() {
                let row = &mut gb.tok_emb[id as usize * e..(id as usize + 1) * e];
                row.iter_mut().zip(&dx[p * e..(p + 1) * e]).for_each(|(a, b)| *a += b);
            }
            total += loss;
        }
        let gb = grads.base.as_mut().expect("base gradients");
        if cfg.grad_clip > 0.0 {
            let norm = gb.tensors_mut().iter().flat_map(|t| t.iter()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let f = (cfg.grad_clip / norm) as f32;
                gb.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v *= f));
            }
        }
        opt.begin_step();
        let decay: Vec<bool> = model.backbone.base.tensors().iter().map(|(_, d, _)| d.len() >= 2).collect();
        for ((p, g), d) in model.backbone.base.tensors_mut().into_iter().zip(gb.tensors_mut()).zip(decay) {
            opt.update(p, g, lr, d);
        }
        let loss = total / cfg.base_batch_size as f64;
        trace.push(TraceRecord { step, lr, loss });
        log::debug!("base step {step} lr {lr:.3e} loss {loss:.5}");
    }
    Ok(TrainReport { trace, trainable_parameters: model.backbone.base.num_parameters() })
}

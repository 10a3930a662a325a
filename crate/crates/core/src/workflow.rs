//! End-to-end steps shared by the command line, the bindings and the tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::backbone::{
    pretrain_base, train_stage1, train_stage2, EmotionModel, GenerationResult, PreparedSample, StageData, TrainConfig,
    TrainReport,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{self, PredictionRecord, SampleRecord, TaskKind};
use crate::metrics::{self, EvalPair, LabelValue, MetricEntry};
use crate::token_pipeline::PipelineConfig;
use crate::tokenizer::Vocab;

pub const MANIFEST_NAME: &str = "manifest.tsv";

pub fn manifest_path(corpus_dir: &Path) -> PathBuf {
    corpus_dir.join(MANIFEST_NAME)
}

pub fn load_corpus(corpus_dir: &Path) -> Result<Vec<SampleRecord>> {
    formats::read_manifest(&manifest_path(corpus_dir))
}

pub fn prepare_split(records: &[SampleRecord], split: &str, pipeline: &PipelineConfig) -> Result<Vec<PreparedSample>> {
    records.iter().filter(|r| r.split == split).map(|r| PreparedSample::load(r, pipeline)).collect()
}

/// Feature widths `[audio, global, temporal]` of a prepared sample.
pub fn input_dims(sample: &PreparedSample) -> [usize; 3] {
    let t = &sample.tokens;
    [t.audio.dims()[1], t.global.dims()[1], t.temporal.dims()[1]]
}

/// Fresh model sized for `records`, with a vocabulary built from them.
pub fn build_model(cfg: &RunConfig, records: &[SampleRecord], probe: &PreparedSample) -> Result<EmotionModel> {
    let labels = cfg.synth.labels.clone();
    for r in records {
        for l in r.labels() {
            if !labels.iter().any(|k| k == l) {
                return Err(Error::UnknownLabel(l.to_string()));
            }
        }
    }
    let texts = crate::backbone::corpus_texts(records, &labels);
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    EmotionModel::init(
        cfg.pipeline,
        cfg.prefusion,
        cfg.model.clone(),
        vocab,
        labels,
        input_dims(probe),
        cfg.train_config().seed,
    )
}

/// Base pretraining, then stage 1 on fresh adapters.
pub fn run_stage1(model: &mut EmotionModel, train: &[PreparedSample], cfg: &TrainConfig) -> Result<(TrainReport, TrainReport)> {
    let base = pretrain_base(model, train, cfg)?;
    model.attach_lora(cfg.seed);
    let stage = train_stage1(model, &StageData::recognition(train.to_vec())?, cfg)?;
    Ok((base, stage))
}

pub fn run_stage2(model: &mut EmotionModel, train: &[PreparedSample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_stage2(model, &StageData::mixed(train.to_vec(), cfg.stage2_mix)?, cfg)
}

/// Greedy generations for every sample, in input order, using at most
/// `parallelism` workers. Instructions are drawn per position from `seed`.
pub fn predict_all(
    model: &EmotionModel,
    samples: &[PreparedSample],
    task: TaskKind,
    max_tokens: usize,
    seed: u64,
    parallelism: usize,
) -> Result<Vec<GenerationResult>> {
    if parallelism == 0 {
        return Err(Error::InvalidArgument("parallelism must be at least 1".into()));
    }
    let slots: Vec<Mutex<Option<Result<GenerationResult>>>> = samples.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(samples.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(sample) = samples.get(i) else { break };
                let instruction = model.eval_instruction(task, seed, i);
                *slots[i].lock().expect("slot lock") = Some(model.predict(sample, task, &instruction, max_tokens));
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().expect("slot lock").expect("every sample is visited")).collect()
}

pub fn prediction_records(samples: &[PreparedSample], results: &[GenerationResult]) -> Vec<PredictionRecord> {
    samples
        .iter()
        .zip(results)
        .map(|(s, g)| PredictionRecord { id: s.id.clone(), prediction: g.answer.clone().unwrap_or_default(), scores: None })
        .collect()
}

fn label_value(text: &str) -> LabelValue {
    if text.contains('|') {
        LabelValue::Set(text.split('|').map(str::to_string).collect())
    } else {
        LabelValue::Label(text.to_string())
    }
}

/// Scores predictions against the manifest labels of the same ids.
///
/// Single-label data yields hit rate, accuracy and weighted F1; multi-label
/// data yields the mean set F-score. Per-class scores add mean AP.
pub fn score_predictions(
    truth: &[SampleRecord],
    preds: &[PredictionRecord],
    labels: &[String],
    dataset: &str,
) -> Result<Vec<MetricEntry>> {
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let by_id: BTreeMap<&str, &SampleRecord> = truth.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut pairs = Vec::with_capacity(preds.len());
    for p in preds {
        let r = by_id.get(p.id.as_str()).ok_or_else(|| Error::MissingMember(p.id.clone()))?;
        pairs.push(EvalPair { id: p.id.clone(), prediction: label_value(&p.prediction), truth: label_value(&r.label) });
    }
    let entry = |metric: &str, value: f64| MetricEntry { dataset: dataset.into(), metric: metric.into(), value };
    let mut out = Vec::new();
    if pairs.iter().all(|p| matches!(p.truth, LabelValue::Set(_))) {
        let mut sum = 0.0;
        for p in &pairs {
            let pred = match &p.prediction {
                LabelValue::Set(s) => s.clone(),
                LabelValue::Label(l) => vec![l.clone()],
                LabelValue::Scores(_) => Vec::new(),
            };
            let LabelValue::Set(t) = &p.truth else { unreachable!("every truth is a set") };
            sum += metrics::set_f_score(&pred, t, None)?;
        }
        out.push(entry("set_f_score", sum / pairs.len() as f64));
    } else {
        out.push(entry("hit_rate", metrics::hit_rate(&pairs)?));
        out.push(entry("accuracy", metrics::accuracy(&pairs)?));
        out.push(entry("weighted_f1", metrics::weighted_f1(&pairs, labels)?));
    }
    if preds.iter().all(|p| p.scores.is_some()) {
        let mut scores = Vec::with_capacity(preds.len());
        let mut flags = Vec::with_capacity(preds.len());
        for (p, pair) in preds.iter().zip(&pairs) {
            let given: BTreeMap<&str, f64> = p.scores.iter().flatten().map(|(l, v)| (l.as_str(), *v)).collect();
            scores.push(
                labels
                    .iter()
                    .map(|l| given.get(l.as_str()).copied().ok_or_else(|| Error::Shape(format!("{}: no score for {l}", p.id))))
                    .collect::<Result<Vec<f64>>>()?,
            );
            let truth: Vec<String> = match &pair.truth {
                LabelValue::Label(l) => vec![l.clone()],
                LabelValue::Set(s) => s.clone(),
                LabelValue::Scores(_) => Vec::new(),
            };
            flags.push(labels.iter().map(|l| truth.contains(l)).collect());
        }
        out.push(entry("mean_ap", metrics::mean_ap(&scores, &flags)?));
    }
    Ok(out)
}

/// Fraction of generations with well-nested think and answer spans.
pub fn tagged_rate(results: &[GenerationResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|g| g.tagged && !g.malformed).count() as f64 / results.len() as f64
}

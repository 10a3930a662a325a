//! Deterministic synthetic tri-modal corpus and instruction sampling.
//!
//! Every sample draws from its own ChaCha stream, so output depends only on
//! the seed and the sample's position, never on generation order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{self, AuFrameRecord, SampleRecord, TaskKind};
use crate::tensor::FeatureTensor;

pub const STAR: &str = "★";

pub const RECOGNITION_PROMPTS: [&str; 10] = [
    "Please determine which emotion label in the video represents: ★.",
    "Identify the displayed emotion in the video: is it ★?",
    "Determine the emotional state shown in the video, choosing from ★.",
    "Please ascertain the specific emotion portrayed in the video, whether it be ★.",
    "Assess and label the emotion evident in the video: could it be ★?",
    "Given the input video and audio, your task is to identify the emotion expressed by the person or people in the video. Your output must be only one emotion label strictly chosen from the following list:★.",
    "Please classify the observed emotional state in the video using one of the following:★",
    "Based on the visual and audio content of the video, identify the emotion expressed by the person. Choose one label from:★",
    "Analyze the video and assign one of the following emotion labels to the person depicted:★",
    "After watching the video, decide which of the following emotions is being expressed:★",
];

pub const REASONING_PROMPTS: [&str; 5] = [
    "The possible emotions are: ★. Based on what you see and hear in the video, including facial expressions, gestures, vocal tone, and spoken words, identify the emotion the person is expressing and explain which clues led to your conclusion.",
    "Choose one emotion from the following list: ★. Watch the video and use both visual signals, such as facial expressions and body movements, and auditory signals, such as tone and intonation, to infer the person’s emotional state. Please describe your reasoning process clearly.",
    "You are given a video containing both visual and audio information. The possible emotion categories are: ★. First, analyze the video by reasoning through facial expressions, gestures, tone of voice, and spoken content. Write your reasoning inside the <think> and </think> tags. Then select the most appropriate emotion and place it inside the <answer> and </answer> tags.",
    "Watch the video and consider all visual and auditory clues, including facial expressions, body movements, voice pitch, tempo, and speech content. The emotion must be one of: ★. Use <think> to explain your reasoning step by step, and then provide the final emotion label in <answer>.",
    "Analyze the multimodal signals in the video. The goal is to infer the person’s emotional state from the following options: ★. In the <think> section, describe how the visual and audio evidence supports your reasoning. Then output the most likely emotion label in <answer>.",
];

pub const DEFAULT_LABELS: [&str; 6] = ["angry", "happy", "neutral", "sad", "surprise", "worried"];

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Prompt pool for a task kind.
pub fn prompt_pool(task: TaskKind) -> &'static [&'static str] {
    match task {
        TaskKind::Recognition => &RECOGNITION_PROMPTS,
        TaskKind::Reasoning => &REASONING_PROMPTS,
    }
}

/// Uniform draw from the task's pool with the label list substituted.
pub fn sample_instruction(task: TaskKind, labels: &[String], rng: &mut impl Rng) -> String {
    let pool = prompt_pool(task);
    pool[rng.random_range(0..pool.len())].replace(STAR, &labels.join(", "))
}

/// [`sample_instruction`] for a task named by text.
pub fn sample_instruction_named(task: &str, labels: &[String], rng: &mut impl Rng) -> Result<String> {
    Ok(sample_instruction(TaskKind::parse(task)?, labels, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub labels: Vec<String>,
    pub samples_per_class: SplitCounts,
    /// Signal-to-noise ratio `s`: class means are unit vectors scaled by it.
    pub snr: f64,
    pub seed: u64,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub global_dim: usize,
    /// Inclusive range of audio frame counts.
    pub audio_len: [usize; 2],
    /// Inclusive range of video frame counts.
    pub video_frames: [usize; 2],
    /// Side of the square per-frame spatial grid.
    pub frame_size: usize,
    pub global_patches: usize,
    pub au_count: usize,
    /// Probability that a transcript contains the class keyword.
    pub keyword_prob: f64,
    /// Probability that a given modality carries the class signal.
    pub modality_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 6,
            labels: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
            samples_per_class: SplitCounts { train: 50, val: 10, test: 20 },
            snr: 2.0,
            seed: 0,
            audio_dim: 32,
            video_dim: 16,
            global_dim: 16,
            audio_len: [48, 128],
            video_frames: [8, 24],
            frame_size: 4,
            global_patches: 16,
            au_count: 17,
            keyword_prob: 0.8,
            modality_prob: 0.7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 || self.labels.len() != self.n_classes {
            return bad(format!("labels lists {} names for {} classes", self.labels.len(), self.n_classes));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.labels {
            let words = crate::tokenizer::split_words(l);
            if words.is_empty() || words.join(" ") != *l || l.contains('|') {
                return bad(format!("label `{l}` must be lowercase words separated by single spaces"));
            }
            if !seen.insert(l) {
                return bad(format!("duplicate label `{l}`"));
            }
        }
        for (name, d) in [("audio_dim", self.audio_dim), ("video_dim", self.video_dim), ("global_dim", self.global_dim)] {
            if d < self.n_classes {
                return bad(format!("{name} {d} is too small for {} orthogonal class means", self.n_classes));
            }
        }
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return bad("snr must be finite and non-negative".into());
        }
        for (name, [lo, hi]) in [("audio_len", self.audio_len), ("video_frames", self.video_frames)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} must be a non-empty range of positive lengths"));
            }
        }
        if self.frame_size == 0 || self.global_patches == 0 || self.au_count == 0 {
            return bad("frame_size, global_patches and au_count must be positive".into());
        }
        for (name, p) in [("keyword_prob", self.keyword_prob), ("modality_prob", self.modality_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        SPLITS.iter().map(|s| self.samples_per_class.get(s)).sum::<usize>() * self.n_classes
    }
}

/// Keyword planted in transcripts for a label.
pub fn keyword(label: &str) -> &str {
    match label {
        "angry" => "furious",
        "happy" => "delighted",
        "neutral" => "fine",
        "sad" => "heartbroken",
        "surprise" => "shocked",
        "worried" => "anxious",
        other => other,
    }
}

const KEYWORD_TEMPLATES: [&str; 4] = [
    "honestly I feel {} about how the meeting went.",
    "I did not expect any of this, I am {} right now.",
    "after the call with my sister I was {} all evening.",
    "you know, being here makes me {} again.",
];

const PLAIN_TEMPLATES: [&str; 4] = [
    "we talked about the weather and the train schedule.",
    "I have to pick up the package before six.",
    "the report is on the desk next to the printer.",
    "they moved the appointment to next Tuesday.",
];

/// Modality order used for signal planting: audio, video, global.
const MODALITY_CUES: [&str; 3] = ["the vocal tone", "the facial movements", "the overall scene"];

/// Templated reasoning target naming the modalities that carry the signal.
pub fn reasoning_target(label: &str, carriers: [bool; 3], keyword_present: bool) -> String {
    let cues: Vec<&str> = MODALITY_CUES.iter().zip(carriers).filter(|(_, c)| *c).map(|(m, _)| *m).collect();
    let cue_text = match cues.as_slice() {
        [] => "no single channel".to_string(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    };
    let words = if keyword_present {
        format!("the words mention being {}", keyword(label))
    } else {
        "the words alone give no clear cue".to_string()
    };
    format!("<think> {cue_text} point to {label}; {words}. </think> <answer> {label} </answer>")
}

/// Orthonormal class means per modality (Gram-Schmidt on Gaussian draws).
fn class_means(n_classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    while basis.len() < n_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn signal_rows(rows: usize, mean: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * mean.len());
    for _ in 0..rows {
        for &m in mean {
            let noise: f64 = StandardNormal.sample(rng);
            // Stored as f32 on disk; round here so in-memory records match.
            out.push(((scale * m + noise) as f32) as f64);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest_path: PathBuf,
    /// Records with paths resolved against the output directory.
    pub records: Vec<SampleRecord>,
}

impl SynthCorpus {
    pub fn split(&self, split: &str) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// Writes the corpus under `out_dir`: `manifest.tsv` plus per-sample feature
/// files in `features/`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthCorpus> {
    cfg.validate()?;
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let mut mean_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = [
        class_means(cfg.n_classes, cfg.audio_dim, &mut mean_rng),
        class_means(cfg.n_classes, cfg.video_dim, &mut mean_rng),
        class_means(cfg.n_classes, cfg.global_dim, &mut mean_rng),
    ];

    let mut relative = Vec::with_capacity(cfg.total_samples());
    for (split_idx, split) in SPLITS.iter().enumerate() {
        let per_class = cfg.samples_per_class.get(split);
        let mut order: Vec<usize> = (0..cfg.n_classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        order_rng.set_stream(1 + split_idx as u64);
        order.shuffle(&mut order_rng);
        for (i, &class) in order.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((split_idx as u64 + 1) << 32) | i as u64);
            let id = format!("{split}{i:04}");
            relative.push(write_sample(cfg, &means, &feat_dir, &id, split, class, &mut rng)?);
        }
    }
    let manifest_path = out_dir.join("manifest.tsv");
    formats::write_manifest(&manifest_path, &relative)?;
    let records = formats::read_manifest(&manifest_path)?;
    Ok(SynthCorpus { manifest_path, records })
}

fn write_sample(
    cfg: &SynthConfig,
    means: &[Vec<Vec<f64>>; 3],
    feat_dir: &Path,
    id: &str,
    split: &str,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleRecord> {
    let label = &cfg.labels[class];
    let mut carriers = [false; 3];
    while !carriers.iter().any(|&c| c) {
        carriers = [rng.random_bool(cfg.modality_prob), rng.random_bool(cfg.modality_prob), rng.random_bool(cfg.modality_prob)];
    }
    let scale = |m: usize| if carriers[m] { cfg.snr } else { 0.0 };

    let audio_len = rng.random_range(cfg.audio_len[0]..=cfg.audio_len[1]);
    let audio = signal_rows(audio_len, &means[0][class], scale(0), rng);
    let frames = rng.random_range(cfg.video_frames[0]..=cfg.video_frames[1]);
    let side = cfg.frame_size;
    let video = signal_rows(frames * side * side, &means[1][class], scale(1), rng);
    let global = signal_rows(frames * (1 + cfg.global_patches), &means[2][class], scale(2), rng);

    // AU intensities: a bump around a random apex frame plus rectified noise.
    let apex = rng.random_range(0..frames) as f64;
    let mut au_frames = Vec::with_capacity(frames);
    for f in 0..frames {
        let bump = (-((f as f64 - apex) / 3.0).powi(2)).exp();
        let values = (0..cfg.au_count)
            .map(|_| {
                let n: f64 = StandardNormal.sample(rng);
                ((bump * 2.0 + 0.3 * n).max(0.0) * 1000.0).round() / 1000.0
            })
            .collect();
        au_frames.push(AuFrameRecord::new(f, values)?);
    }

    // Keyword presence is drawn even at s = 0 so the random stream layout is
    // identical; at s = 0 the keyword names a random class instead.
    let keyword_present = rng.random_bool(cfg.keyword_prob);
    let keyword_class = if cfg.snr > 0.0 { class } else { rng.random_range(0..cfg.n_classes) };
    let transcript = if keyword_present {
        KEYWORD_TEMPLATES[rng.random_range(0..KEYWORD_TEMPLATES.len())].replace("{}", keyword(&cfg.labels[keyword_class]))
    } else {
        PLAIN_TEMPLATES[rng.random_range(0..PLAIN_TEMPLATES.len())].to_string()
    };

    let write = |suffix: &str, t: FeatureTensor| -> Result<String> {
        let name = format!("{id}.{suffix}.mmef");
        formats::save_tensor(&feat_dir.join(&name), &t)?;
        Ok(format!("features/{name}"))
    };
    let audio_path = write("audio", FeatureTensor::new(vec![audio_len, cfg.audio_dim], audio)?)?;
    let video_path = write("video", FeatureTensor::new(vec![frames, side, side, cfg.video_dim], video)?)?;
    let global_path =
        write("global", FeatureTensor::new(vec![frames, 1 + cfg.global_patches, cfg.global_dim], global)?)?;
    let au_path = feat_dir.join(format!("{id}.au.csv"));
    fs::write(&au_path, formats::format_au_rows(&au_frames)).map_err(|e| Error::io(&au_path, e))?;

    Ok(SampleRecord {
        id: id.to_string(),
        audio_path: audio_path.into(),
        video_path: video_path.into(),
        global_path: global_path.into(),
        transcript,
        label: label.clone(),
        task: TaskKind::Recognition,
        split: split.to_string(),
        reasoning_target: Some(reasoning_target(label, carriers, keyword_present && cfg.snr > 0.0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{ANSWER_CLOSE, ANSWER_OPEN, THINK_CLOSE, THINK_OPEN};

    fn labels() -> Vec<String> {
        DEFAULT_LABELS.iter().map(|s| s.to_string()).collect()
    }

    fn small(snr: f64) -> SynthConfig {
        SynthConfig {
            samples_per_class: SplitCounts { train: 10, val: 10, test: 10 },
            snr,
            audio_len: [20, 70],
            video_frames: [3, 12],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn recognition_draw_substitutes_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = sample_instruction(TaskKind::Recognition, &labels(), &mut rng);
            assert!(!s.contains(STAR));
            assert!(s.contains("angry, happy, neutral, sad, surprise, worried"));
        }
    }

    #[test]
    fn tagged_reasoning_templates_mention_both_tags() {
        for p in REASONING_PROMPTS.iter().filter(|p| p.contains("<think>")) {
            assert!(p.contains("<answer>"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws: std::collections::BTreeSet<String> =
            (0..100).map(|_| sample_instruction(TaskKind::Reasoning, &labels(), &mut rng)).collect();
        assert_eq!(draws.len(), REASONING_PROMPTS.len());
    }

    #[test]
    fn instruction_draw_is_seeded() {
        let draw = |seed| sample_instruction(TaskKind::Recognition, &labels(), &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(draw(9), draw(9));
        assert!(sample_instruction_named("dance", &labels(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn reasoning_targets_are_tagged() {
        let t = reasoning_target("sad", [true, false, true], true);
        for tag in [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE] {
            assert!(t.contains(tag));
        }
        assert!(t.contains("the vocal tone and the overall scene"));
    }

    #[test]
    fn corpus_counts_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small(2.0);
        let ca = generate(&cfg, a.path()).unwrap();
        generate(&cfg, b.path()).unwrap();
        assert_eq!(ca.records.len(), 180);
        let ids: std::collections::BTreeSet<_> = ca.records.iter().map(|r| &r.id).collect();
        assert_eq!(ids.len(), 180);
        for split in SPLITS {
            assert_eq!(ca.split(split).len(), 60);
        }
        let mut files: Vec<_> = walk(a.path());
        files.sort();
        assert_eq!(files.len(), 1 + 180 * 4);
        for rel in files {
            let x = fs::read(a.path().join(&rel)).unwrap();
            let y = fs::read(b.path().join(&rel)).unwrap();
            assert!(x == y, "{rel:?} differs");
        }
    }

    fn walk(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        out
    }

    fn pooled_features(r: &SampleRecord) -> Vec<f64> {
        let mut out = Vec::new();
        for p in [&r.audio_path, &r.video_path, &r.global_path] {
            let t = formats::load_tensor(p).unwrap();
            let d = *t.dims().last().unwrap();
            let n = t.len() / d;
            let mut mean = vec![0.0; d];
            for row in t.data().chunks_exact(d) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
            }
            out.extend(mean);
        }
        out
    }

    fn nearest_mean_accuracy(corpus: &SynthCorpus, labels: &[String]) -> f64 {
        let train: Vec<_> = corpus.split("train").iter().map(|r| (pooled_features(r), r.label.clone())).collect();
        let dim = train[0].0.len();
        let centroids: Vec<Vec<f64>> = labels
            .iter()
            .map(|l| {
                let members: Vec<_> = train.iter().filter(|(_, y)| y == l).collect();
                let mut c = vec![0.0; dim];
                for (x, _) in &members {
                    c.iter_mut().zip(x).for_each(|(a, b)| *a += b / members.len() as f64);
                }
                c
            })
            .collect();
        let test = corpus.split("test");
        let hits = test
            .iter()
            .filter(|r| {
                let x = pooled_features(r);
                let dist = |c: &Vec<f64>| c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..labels.len()).min_by(|&i, &j| dist(&centroids[i]).total_cmp(&dist(&centroids[j]))).unwrap();
                labels[best] == r.label
            })
            .count();
        hits as f64 / test.len() as f64
    }

    #[test]
    fn nearest_class_mean_separates_at_snr_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(2.0);
        let corpus = generate(&cfg, dir.path()).unwrap();
        assert!(nearest_mean_accuracy(&corpus, &cfg.labels) >= 0.95);
    }

    #[test]
    fn zero_snr_removes_class_signal() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(0.0);
        let corpus = generate(&cfg, dir.path()).unwrap();
        assert!(nearest_mean_accuracy(&corpus, &cfg.labels) < 0.45);
        // Keywords no longer follow the class.
        let agree = corpus
            .records
            .iter()
            .filter(|r| r.transcript.contains(keyword(&r.label)))
            .count() as f64
            / corpus.records.len() as f64;
        assert!(agree < 0.4, "keyword agreement {agree}");
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SynthConfig { n_classes: 5, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { snr: -1.0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { audio_dim: 3, ..Default::default() }.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.labels[0] = "Angry".into();
        assert!(cfg.validate().is_err());
    }
}

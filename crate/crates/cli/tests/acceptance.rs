//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use emofuse::annotate::{run_pipeline, select_peak_frame, Endpoints};
use emofuse::backbone::{lr_at, Backbone, BaseLm, LoraSet, ToyLmConfig, TrainConfig};
use emofuse::config::RunConfig;
use emofuse::formats::{AuFrameRecord, TaskKind};
use emofuse::linalg::Affine;
use emofuse::metrics::{mean_ap, weighted_f1, EvalPair};
use emofuse::prefusion::{fuse, fuse_backward, modality_mean, standardize, Conv1d, PreFusionConfig, PreFusionParams};
use emofuse::synthgen::{self, SplitCounts, SynthConfig};
use emofuse::token_pipeline::adaptive_pool_1d;
use emofuse::{workflow, FeatureTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rand_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> FeatureTensor {
    FeatureTensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn perturb(params: &mut PreFusionParams, rng: &mut impl Rng) {
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
    }
}

fn objective(inputs: &[FeatureTensor; 3], params: &PreFusionParams, upstream: &FeatureTensor) -> f64 {
    let out = fuse(&inputs[0], &inputs[1], &inputs[2], params).unwrap();
    out.u_f.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let instances = 20;
    for _ in 0..instances {
        let d = rng.random_range(4..=8);
        let t = rng.random_range(4..=8);
        let dims = [rng.random_range(2..=6), rng.random_range(2..=6), rng.random_range(2..=6)];
        let cfg = PreFusionConfig { dim: d, tokens: t, n_blocks: rng.random_range(1..=3), kernel_size: 3 };
        let mut params = PreFusionParams::init(&cfg, dims, &mut rng).unwrap();
        perturb(&mut params, &mut rng);
        let mut inputs = [rand_tensor(t, dims[0], &mut rng), rand_tensor(t, dims[1], &mut rng), rand_tensor(t, dims[2], &mut rng)];
        let upstream = rand_tensor(t, d, &mut rng);
        let grads = fuse_backward(&inputs[0], &inputs[1], &inputs[2], &params, &upstream).unwrap();

        let analytic: Vec<Vec<f64>> = grads.params.tensors().iter().map(|(_, _, v)| v.to_vec()).collect();
        for (ti, g) in analytic.iter().enumerate() {
            for (k, &a) in g.iter().enumerate() {
                let orig = params.tensors_mut()[ti][k];
                params.tensors_mut()[ti][k] = orig + h;
                let up = objective(&inputs, &params, &upstream);
                params.tensors_mut()[ti][k] = orig - h;
                let down = objective(&inputs, &params, &upstream);
                params.tensors_mut()[ti][k] = orig;
                worst = worst.max(rel_err(a, (up - down) / (2.0 * h)));
                checked += 1;
            }
        }
        let d_inputs = [grads.d_audio.clone(), grads.d_global.clone(), grads.d_temporal.clone()];
        for m in 0..3 {
            for k in 0..inputs[m].len() {
                let orig = inputs[m].data()[k];
                inputs[m].data_mut()[k] = orig + h;
                let up = objective(&inputs, &params, &upstream);
                inputs[m].data_mut()[k] = orig - h;
                let down = objective(&inputs, &params, &upstream);
                inputs[m].data_mut()[k] = orig;
                worst = worst.max(rel_err(d_inputs[m].data()[k], (up - down) / (2.0 * h)));
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{instances} instances, {checked} coordinates, max rel err {worst:.2e}, {secs:.1}s");
    ensure(worst <= 1e-4, &detail)?;
    ensure(secs < 30.0, &detail)?;
    Ok(detail)
}

fn residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let (d, t) = (rng.random_range(2..=8), rng.random_range(1..=9));
        let dims = [rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5)];
        let cfg = PreFusionConfig { dim: d, tokens: t, n_blocks: rng.random_range(1..=3), kernel_size: 3 };
        let mut params = PreFusionParams::init(&cfg, dims, &mut rng).unwrap();
        params.conv_stem = Conv1d::identity(d, 3);
        params.conv_blocks.iter_mut().for_each(|b| *b = Conv1d::zeros(d, 3));
        params.attn_out = Affine::zeros(d, 3);
        let (a, g, v) = (rand_tensor(t, dims[0], &mut rng), rand_tensor(t, dims[1], &mut rng), rand_tensor(t, dims[2], &mut rng));
        let mean = modality_mean(&standardize(&a, &g, &v, &params).unwrap());
        let out = fuse(&a, &g, &v, &params).unwrap();
        ensure(out.f_conv.data() == &mean[..], "F_conv differs from the modality mean")?;
        ensure(out.f_attn.data() == &mean[..], "F_attn differs from the modality mean")?;
        let twice: Vec<f64> = mean.iter().map(|m| 2.0 * m).collect();
        ensure(out.u_f.data() == &twice[..], "u_f differs from twice the modality mean")?;
    }
    Ok("10 random instances bitwise equal".into())
}

fn lora_noop() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = ToyLmConfig { layers: 2, heads: 2, embed_dim: 32, context: 64, vocab_size: 50, ..Default::default() };
    let base = BaseLm::init(&cfg, &mut rng).unwrap();
    let lora = LoraSet::init(&cfg, &mut rng);
    let plain = Backbone::new(base.clone(), None);
    let tuned = Backbone::new(base, Some(lora));
    for _ in 0..10 {
        let len = rng.random_range(1..=64);
        let x0: Vec<f32> =
            (0..len).flat_map(|_| plain.embed_token(rng.random_range(0..50u32)).to_vec()).collect();
        let a = plain.logits(&x0, len).unwrap();
        let b = tuned.logits(&x0, len).unwrap();
        ensure(a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits())), "logits differ")?;
    }
    Ok("10 random prompts bitwise equal".into())
}

fn pooling_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut cases = 0;
    for l in 1..=128usize {
        let seq = rand_tensor(l, 2, &mut rng);
        for t in 1..=l {
            let got = adaptive_pool_1d(&seq, t).unwrap();
            for i in 0..t {
                let lo = (i as f64 * l as f64 / t as f64).floor() as usize;
                let hi = ((i + 1) as f64 * l as f64 / t as f64).ceil() as usize;
                for c in 0..2 {
                    let mean = (lo..hi).map(|r| seq.data()[r * 2 + c]).sum::<f64>() / (hi - lo) as f64;
                    ensure((got.data()[i * 2 + c] - mean).abs() <= 1e-12, format!("L={l} T={t} row {i}"))?;
                }
            }
            cases += 1;
        }
        if l < 64 {
            for t in l + 1..=64 {
                let got = adaptive_pool_1d(&seq, t).unwrap();
                let mut expected = seq.data().to_vec();
                expected.resize(t * 2, 0.0);
                ensure(got.data() == &expected[..], format!("padding L={l} T={t}"))?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} (L, T) pairs"))
}

fn reference_weighted_f1(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let n = truth.len() as f64;
    let mut total = 0.0;
    for c in 0..classes {
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t != c).count() as f64;
        let fne = pred.iter().zip(truth).filter(|(p, t)| **p != c && **t == c).count() as f64;
        let support = tp + fne;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if support > 0.0 { tp / support } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        total += support / n * f1;
    }
    total
}

fn reference_ap(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let rank = |i: usize| {
        1 + (0..scores.len()).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count()
    };
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| truth[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let sum: f64 = positives
        .iter()
        .map(|&i| {
            let r = rank(i);
            positives.iter().filter(|&&j| rank(j) <= r).count() as f64 / r as f64
        })
        .sum();
    Some(sum / positives.len() as f64)
}

fn metric_oracles() -> Outcome {
    let labels: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..60);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        // index 5 is a prediction outside the label set
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let name = |i: usize| if i < 5 { labels[i].clone() } else { "unlisted".to_string() };
        let pairs: Vec<EvalPair> =
            (0..n).map(|i| EvalPair::label(&i.to_string(), &name(pred[i]), &name(truth[i]))).collect();
        let got = weighted_f1(&pairs, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((got - reference_weighted_f1(&pred, &truth, 5)).abs());
    }
    ensure(worst <= 1e-9, format!("weighted F1 deviates by {worst:e}"))?;
    let mut worst_ap: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..50);
        let k = rng.random_range(1..5);
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| (rng.random_range(0..8) as f64) / 4.0).collect()).collect();
        let mut truth: Vec<Vec<bool>> = (0..n).map(|_| (0..k).map(|_| rng.random_bool(0.4)).collect()).collect();
        truth[0][0] = true;
        let refs: Vec<f64> = (0..k)
            .filter_map(|c| {
                let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                let t: Vec<bool> = truth.iter().map(|r| r[c]).collect();
                reference_ap(&s, &t)
            })
            .collect();
        let expected = refs.iter().sum::<f64>() / refs.len() as f64;
        worst_ap = worst_ap.max((mean_ap(&scores, &truth).map_err(|e| e.to_string())? - expected).abs());
    }
    ensure(worst_ap <= 1e-9, format!("mean AP deviates by {worst_ap:e}"))?;
    let ab: Vec<String> = vec!["a".into(), "b".into()];
    let waf = weighted_f1(
        &[EvalPair::label("0", "a", "a"), EvalPair::label("1", "b", "a"), EvalPair::label("2", "b", "b")],
        &ab,
    )
    .unwrap();
    ensure((waf - 2.0 / 3.0).abs() <= 1e-12, format!("worked WAF example gave {waf}"))?;
    let ap = mean_ap(&[vec![0.9], vec![0.8], vec![0.1]], &[vec![true], vec![false], vec![true]]).unwrap();
    ensure((ap - 5.0 / 6.0).abs() <= 1e-12, format!("worked AP example gave {ap}"))?;
    Ok(format!("max deviation WAF {worst:.1e}, mAP {worst_ap:.1e}; worked examples within 1e-12"))
}

fn peak_frame_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for case in 0..1000 {
        let len = rng.random_range(1..=1000);
        let aus = rng.random_range(1..=4);
        let frames: Vec<AuFrameRecord> = (0..len)
            .map(|i| AuFrameRecord::new(i, (0..aus).map(|_| rng.random_range(0..4) as f64 * 0.5).collect()).unwrap())
            .collect();
        let sums: Vec<f64> = frames.iter().map(|f| f.au_intensities.iter().sum()).collect();
        let mut best = 0;
        for i in 1..len {
            if sums[i] > sums[best] {
                best = i;
            }
        }
        let got = select_peak_frame(&frames).map_err(|e| e.to_string())?;
        ensure(got == best, format!("sequence {case}: got {got}, expected {best}"))?;
    }
    Ok("1000 random sequences".into())
}

/// Settings used for the end-to-end curriculum runs.
fn curriculum_config() -> TrainConfig {
    TrainConfig {
        total_steps: 600,
        stage1_steps: 200,
        warmup_steps: 20,
        peak_lr: 1e-3,
        batch_size: 4,
        base_steps: 300,
        base_batch_size: 8,
        ..Default::default()
    }
}

struct Curriculum {
    run: RunConfig,
    train: Vec<emofuse::backbone::PreparedSample>,
    test: Vec<emofuse::backbone::PreparedSample>,
    model: emofuse::backbone::EmotionModel,
    hit_rate: f64,
}

fn hits(model: &emofuse::backbone::EmotionModel, test: &[emofuse::backbone::PreparedSample], task: TaskKind, max: usize) -> (f64, f64) {
    let results = workflow::predict_all(model, test, task, max, 0, 1).unwrap();
    let correct = test.iter().zip(&results).filter(|(s, g)| g.answer.as_deref() == Some(s.label.as_str())).count();
    (correct as f64 / test.len() as f64, workflow::tagged_rate(&results))
}

fn stage1_run(dir: &Path, snr: f64) -> Curriculum {
    let run = RunConfig { synth: SynthConfig { snr, ..Default::default() }, train: curriculum_config(), ..Default::default() };
    synthgen::generate(&run.synth, dir).unwrap();
    let records = workflow::load_corpus(dir).unwrap();
    let train = workflow::prepare_split(&records, "train", &run.pipeline).unwrap();
    let test = workflow::prepare_split(&records, "test", &run.pipeline).unwrap();
    let mut model = workflow::build_model(&run, &records, &train[0]).unwrap();
    workflow::run_stage1(&mut model, &train, &run.train).unwrap();
    let (hit_rate, _) = hits(&model, &test, TaskKind::Recognition, 8);
    Curriculum { run, train, test, model, hit_rate }
}

fn curriculum(root: &Path, keep: &mut Option<Curriculum>) -> Outcome {
    let start = Instant::now();
    let signal = stage1_run(&root.join("snr2"), 2.0);
    let noise = stage1_run(&root.join("snr0"), 0.0);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "hit rate {:.3} at s=2, {:.3} at s=0, {} stage-1 steps, {secs:.0}s on {} core(s)",
        signal.hit_rate,
        noise.hit_rate,
        signal.run.train.stage1_steps,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    );
    let (s2, s0) = (signal.hit_rate, noise.hit_rate);
    *keep = Some(signal);
    ensure(s2 >= 0.9 && s0 <= 0.27, &detail)?;
    ensure(secs < 15.0 * 60.0, &detail)?;
    Ok(detail)
}

fn stage2_format(stage1: Option<Curriculum>) -> Outcome {
    let mut c = stage1.ok_or("stage 1 run unavailable")?;
    workflow::run_stage2(&mut c.model, &c.train, &c.run.train).map_err(|e| e.to_string())?;
    let (recognition, _) = hits(&c.model, &c.test, TaskKind::Recognition, 8);
    let (reasoning, tagged) = hits(&c.model, &c.test, TaskKind::Reasoning, 48);
    let detail = format!(
        "tagged {:.1}%, reasoning answer hit {reasoning:.3}, recognition hit {recognition:.3} (stage 1: {:.3})",
        tagged * 100.0,
        c.hit_rate
    );
    ensure(tagged >= 0.95, &detail)?;
    ensure(recognition >= c.hit_rate - 0.05, &detail)?;
    Ok(detail)
}

fn cli(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_emofuse")).args(args).current_dir(dir).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("`emofuse {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Outcome {
    for run in ["a", "b"] {
        let dir = root.join(run);
        fs::create_dir_all(&dir).unwrap();
        cli(&["synth", "--seed", "5", "--out", "corpus"], &dir)?;
        cli(&["train", "--seed", "5", "--corpus", "corpus", "--out", "run", "--steps", "50"], &dir)?;
        cli(&["annotate", "--parallelism", "1", "--manifest", "corpus/manifest.tsv", "--out", "ann"], &dir)?;
    }
    let mut files = 0;
    for sub in ["corpus", "run", "ann"] {
        let (a, b) = (tree_bytes(&root.join("a").join(sub)), tree_bytes(&root.join("b").join(sub)));
        ensure(!a.is_empty() && a == b, format!("{sub} artifacts differ between runs"))?;
        files += a.len();
    }
    Ok(format!("synth, train --steps 50 and annotate: {files} files byte-identical"))
}

fn schedule() -> Outcome {
    let mut detail = Vec::new();
    for (total, warmup) in [(2000usize, 100usize), (100_000, 1000)] {
        let cfg = TrainConfig { total_steps: total, warmup_steps: warmup, peak_lr: 1e-4, ..Default::default() };
        let mid = (total + warmup) / 2;
        let values = [lr_at(0, &cfg), lr_at(warmup, &cfg), lr_at(mid, &cfg)];
        for (v, want) in values.iter().zip([0.0, 1e-4, 5e-5]) {
            ensure((v - want).abs() <= 1e-12, format!("total {total}, warmup {warmup}: {v:e} vs {want:e}"))?;
        }
        detail.push(format!("{total}/{warmup}"));
    }
    Ok(format!("0, 1e-4, 5e-5 reproduced for total/warmup {}", detail.join(" and ")))
}

fn annotation_isolation(root: &Path) -> Outcome {
    let cfg = SynthConfig {
        n_classes: 5,
        labels: synthgen::DEFAULT_LABELS[..5].iter().map(|s| s.to_string()).collect(),
        samples_per_class: SplitCounts { train: 2, val: 0, test: 0 },
        ..Default::default()
    };
    let corpus = synthgen::generate(&cfg, &root.join("corpus")).unwrap();
    ensure(corpus.records.len() == 10, "expected ten samples")?;
    let broken = &corpus.records[4];
    fs::write(broken.au_path(), "0.5,abc\n").unwrap();
    let one = run_pipeline(&corpus.records, &Endpoints::mock(), 1).map_err(|e| e.to_string())?;
    let eight = run_pipeline(&corpus.records, &Endpoints::mock(), 8).map_err(|e| e.to_string())?;
    ensure(one == eight, "results depend on parallelism")?;
    ensure(one.records.len() == 9 && one.failures.len() == 1, "expected nine records and one failure")?;
    ensure(one.failures[0].sample_id == broken.id, "failure names the wrong sample")?;
    for p in ["1", "8"] {
        cli(&["annotate", "--parallelism", p, "--manifest", "corpus/manifest.tsv", "--out", &format!("ann{p}")], root)?;
    }
    ensure(tree_bytes(&root.join("ann1")) == tree_bytes(&root.join("ann8")), "CLI outputs differ")?;
    Ok(format!("9 records, failure `{}`, exit 0 at parallelism 1 and 8", broken.id))
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let mut stage1 = None;
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(&mut *f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} [{tag}] {name}: {detail} ({:.1}s)", start.elapsed().as_secs_f64());
    };
    report(1, "pre-fusion gradient check", &mut gradient_check);
    report(2, "residual identity", &mut residual_identity);
    report(3, "LoRA no-op", &mut lora_noop);
    report(4, "pooling oracles", &mut pooling_oracle);
    report(5, "metric oracles", &mut metric_oracles);
    report(6, "peak-frame oracle", &mut peak_frame_oracle);
    report(7, "curriculum end-to-end", &mut || curriculum(&root.path().join("curriculum"), &mut stage1));
    report(8, "stage 2 format discipline", &mut || stage2_format(stage1.take()));
    report(9, "determinism", &mut || determinism(&root.path().join("determinism")));
    report(10, "schedule check", &mut schedule);
    report(11, "annotation isolation", &mut || annotation_isolation(&root.path().join("isolation")));
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}

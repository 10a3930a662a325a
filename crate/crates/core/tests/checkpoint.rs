use emofuse::backbone::{load_checkpoint, save_checkpoint};
use emofuse::config::RunConfig;
use emofuse::formats::TaskKind;
use emofuse::{synthgen, workflow};

const SMALL: &str = r#"
[model]
layers = 1
heads = 2
embed_dim = 32

[train]
total_steps = 6
stage1_steps = 3
warmup_steps = 1
base_steps = 2
batch_size = 2
base_batch_size = 2

[synth.samples_per_class]
train = 2
val = 0
test = 1
"#;

#[test]
fn trained_checkpoint_reloads_with_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let corpus = tmp.path().join("corpus");
    synthgen::generate(&cfg.synth_config(), &corpus).unwrap();
    let records = workflow::load_corpus(&corpus).unwrap();
    let train = workflow::prepare_split(&records, "train", &cfg.pipeline).unwrap();
    let test = workflow::prepare_split(&records, "test", &cfg.pipeline).unwrap();
    let tcfg = cfg.train_config();
    let mut model = workflow::build_model(&cfg, &records, &train[0]).unwrap();
    let (_, stage1) = workflow::run_stage1(&mut model, &train, &tcfg).unwrap();
    assert_eq!(stage1.trace.len(), 3);
    workflow::run_stage2(&mut model, &train, &tcfg).unwrap();

    let path = tmp.path().join("stage2.ckpt");
    save_checkpoint(&path, &model, &tcfg, 2, 3).unwrap();
    let (loaded, meta) = load_checkpoint(&path).unwrap();
    assert_eq!((meta.stage, meta.step), (2, 3));
    assert_eq!(loaded.labels, model.labels);
    assert_eq!(loaded.to_container().encode(), model.to_container().encode());

    for task in [TaskKind::Recognition, TaskKind::Reasoning] {
        let a = workflow::predict_all(&model, &test, task, 6, 1, 1).unwrap();
        let b = workflow::predict_all(&loaded, &test, task, 6, 1, 2).unwrap();
        let raw = |v: &[emofuse::backbone::GenerationResult]| v.iter().map(|g| g.raw.clone()).collect::<Vec<_>>();
        assert_eq!(raw(&a), raw(&b));
    }
}

#[test]
fn scoring_own_labels_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let corpus = synthgen::generate(&cfg.synth_config(), tmp.path()).unwrap();
    let preds: Vec<_> = corpus
        .records
        .iter()
        .map(|r| emofuse::formats::PredictionRecord { id: r.id.clone(), prediction: r.label.clone(), scores: None })
        .collect();
    let entries = workflow::score_predictions(&corpus.records, &preds, &cfg.synth.labels, "synthetic").unwrap();
    let names: Vec<&str> = entries.iter().map(|e| e.metric.as_str()).collect();
    assert_eq!(names, ["hit_rate", "accuracy", "weighted_f1"]);
    assert!(entries.iter().all(|e| e.value == 1.0));
}

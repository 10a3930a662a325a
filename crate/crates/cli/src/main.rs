use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emofuse::annotate::{run_pipeline, Endpoints};
use emofuse::backbone::{load_checkpoint, save_checkpoint, TrainConfig, TrainReport};
use emofuse::config::RunConfig;
use emofuse::formats::{self, TaskKind, TensorContainer};
use emofuse::metrics::{aggregate, MetricEntry};
use emofuse::prefusion::{fuse, PreFusionParams};
use emofuse::{synthgen, workflow, Error, FeatureTensor};

mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const MISSING_DEPENDENCY: u8 = 4;
    pub const MISMATCH: u8 = 5;
    pub const TOTAL_FAILURE: u8 = 6;
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Missing(String),
    Total(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(e) => match e {
                Error::Config(_) => exit::CONFIG,
                Error::Io { .. } | Error::Format { .. } => exit::IO,
                Error::Shape(_)
                | Error::KindMismatch(_)
                | Error::UnalignedStreams(_)
                | Error::MissingMember(_)
                | Error::UnknownLabel(_) => exit::MISMATCH,
                _ => exit::OTHER,
            },
            Failure::Missing(_) => exit::MISSING_DEPENDENCY,
            Failure::Total(_) => exit::TOTAL_FAILURE,
            Failure::Usage(_) => exit::CONFIG,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Missing(m) | Failure::Total(m) | Failure::Usage(m) => m.clone(),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "emofuse", version, about = "Tri-modal emotion recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker count for annotation and evaluation.
    #[arg(long)]
    parallelism: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if let Some(p) = self.parallelism {
            cfg.parallelism = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Recognition,
    Reasoning,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Recognition => TaskKind::Recognition,
            Task::Reasoning => TaskKind::Reasoning,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tri-modal corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Corpus directory (defaults to `corpus_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one curriculum stage and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-1 checkpoint to continue from (stage 2 only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Caps every training phase of this run at this many steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions, or generate them from a checkpoint first.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "recognition")]
        task: Task,
        /// Extra averages, e.g. `avg=dsA,dsB;other=dsC/hit_rate`.
        #[arg(long)]
        groups: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Annotate a manifest with the configured describer endpoints.
    Annotate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run pre-fusion on three token streams and dump every intermediate.
    Fuse {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        global: PathBuf,
        #[arg(long)]
        temporal: PathBuf,
        /// Pre-fusion parameter container or full checkpoint.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { common, out } => cmd_synth(&common, out),
        Command::Train { common, stage, checkpoint, steps, corpus, out } => {
            cmd_train(&common, stage, checkpoint, steps, corpus, out)
        }
        Command::Eval { common, predictions, checkpoint, task, groups, corpus, out } => {
            cmd_eval(&common, predictions, checkpoint, task.into(), groups, corpus, out)
        }
        Command::Annotate { common, manifest, out } => cmd_annotate(&common, manifest, out),
        Command::Fuse { audio, global, temporal, params, out } => cmd_fuse(&audio, &global, &temporal, &params, &out),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e }.into())
}

fn cmd_synth(common: &Common, out: Option<PathBuf>) -> CmdResult {
    let cfg = common.load()?;
    let dir = out.unwrap_or_else(|| cfg.corpus_dir.clone());
    let corpus = synthgen::generate(&cfg.synth_config(), &dir)?;
    println!("manifest: {}", corpus.manifest_path.display());
    println!("records: {}", corpus.records.len());
    for split in synthgen::SPLITS {
        let mut per_label: BTreeMap<&str, usize> = BTreeMap::new();
        for r in corpus.split(split) {
            *per_label.entry(r.label.as_str()).or_default() += 1;
        }
        let parts: Vec<String> = per_label.iter().map(|(l, n)| format!("{l}={n}")).collect();
        println!("{split}: {} ({})", corpus.split(split).len(), parts.join(" "));
    }
    Ok(())
}

/// Applies a `--steps` cap to one stage and its base pretraining.
fn capped(mut t: TrainConfig, stage: u8, steps: Option<usize>) -> TrainConfig {
    let Some(n) = steps else { return t };
    if stage == 1 {
        let stage2 = t.total_steps - t.stage1_steps;
        t.stage1_steps = n;
        t.total_steps = n + stage2;
        t.base_steps = t.base_steps.min(n);
        t.warmup_steps = t.warmup_steps.min(n / 10);
    } else {
        t.total_steps = t.stage1_steps + n;
    }
    t
}

fn write_trace(path: &Path, report: &TrainReport) -> CmdResult {
    formats::write_loss_trace(path, &report.trace)?;
    Ok(())
}

fn cmd_train(
    common: &Common,
    stage: u8,
    checkpoint: Option<PathBuf>,
    steps: Option<usize>,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CmdResult {
    let cfg = common.load()?;
    let tcfg = capped(TrainConfig { stage, ..cfg.train_config() }, stage, steps);
    tcfg.validate()?;
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let corpus = corpus.unwrap_or_else(|| cfg.corpus_dir.clone());
    if !workflow::manifest_path(&corpus).is_file() {
        return Err(Failure::Missing(format!("no corpus manifest at {}", workflow::manifest_path(&corpus).display())));
    }
    let records = workflow::load_corpus(&corpus)?;
    create_dir(&out)?;
    let (model, report) = if stage == 1 {
        let train = workflow::prepare_split(&records, "train", &cfg.pipeline)?;
        let probe = train.first().ok_or(Error::EmptyInput)?;
        let mut model = workflow::build_model(&cfg, &records, probe)?;
        let (base, report) = workflow::run_stage1(&mut model, &train, &tcfg)?;
        write_trace(&out.join("base.trace.tsv"), &base)?;
        (model, report)
    } else {
        let ckpt = checkpoint.ok_or_else(|| Failure::Missing("stage 2 needs --checkpoint from stage 1".into()))?;
        if !ckpt.is_file() {
            return Err(Failure::Missing(format!("checkpoint {} does not exist", ckpt.display())));
        }
        let (mut model, _) = load_checkpoint(&ckpt)?;
        model.attach_lora(tcfg.seed);
        let train = workflow::prepare_split(&records, "train", &model.pipeline)?;
        let report = workflow::run_stage2(&mut model, &train, &tcfg)?;
        (model, report)
    };
    let ckpt_path = out.join(format!("stage{stage}.ckpt"));
    save_checkpoint(&ckpt_path, &model, &tcfg, stage, report.trace.len())?;
    write_trace(&out.join(format!("stage{stage}.trace.tsv")), &report)?;
    println!("checkpoint: {}", ckpt_path.display());
    println!("trainable parameters: {}", report.trainable_parameters);
    match report.final_loss() {
        Some(l) => println!("final loss: {l:.6}"),
        None => println!("final loss: n/a (no steps)"),
    }
    Ok(())
}

fn parse_groups(text: &str) -> Result<Vec<(String, Vec<String>)>, Failure> {
    text.split(';')
        .filter(|g| !g.trim().is_empty())
        .map(|g| {
            let (name, members) =
                g.split_once('=').ok_or_else(|| Failure::Usage(format!("group `{g}` must look like name=a,b")))?;
            Ok((name.trim().to_string(), members.split(',').map(|m| m.trim().to_string()).collect()))
        })
        .collect()
}

fn cmd_eval(
    common: &Common,
    predictions: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    task: TaskKind,
    groups: Option<String>,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CmdResult {
    let cfg = common.load()?;
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let corpus = corpus.unwrap_or_else(|| cfg.corpus_dir.clone());
    let mut group_specs: Vec<(String, Vec<String>)> =
        cfg.eval.groups.iter().map(|g| (g.name.clone(), g.members.clone())).collect();
    if let Some(g) = &groups {
        group_specs.extend(parse_groups(g)?);
    }
    for member in group_specs.iter().flat_map(|(_, m)| m) {
        let dataset = member.split_once('/').map_or(member.as_str(), |(d, _)| d);
        if dataset != cfg.eval.dataset {
            return Err(Error::MissingMember(member.clone()).into());
        }
    }
    if !workflow::manifest_path(&corpus).is_file() {
        return Err(Failure::Missing(format!("no corpus manifest at {}", workflow::manifest_path(&corpus).display())));
    }
    let records = workflow::load_corpus(&corpus)?;
    create_dir(&out)?;
    let mut entries: Vec<MetricEntry>;
    match (predictions, checkpoint) {
        (Some(p), None) => {
            let preds = formats::read_predictions(&p)?;
            entries = workflow::score_predictions(&records, &preds, &cfg.synth.labels, &cfg.eval.dataset)?;
        }
        (None, Some(c)) => {
            if !c.is_file() {
                return Err(Failure::Missing(format!("checkpoint {} does not exist", c.display())));
            }
            let (model, meta) = load_checkpoint(&c)?;
            let split: Vec<_> = records.iter().filter(|r| r.split == cfg.eval.split).cloned().collect();
            let samples = workflow::prepare_split(&split, &cfg.eval.split, &model.pipeline)?;
            let results = workflow::predict_all(
                &model,
                &samples,
                task,
                cfg.eval.max_new_tokens,
                meta.seed,
                cfg.parallelism,
            )?;
            let preds = workflow::prediction_records(&samples, &results);
            formats::write_predictions(&out.join("predictions.tsv"), &preds)?;
            entries = workflow::score_predictions(&split, &preds, &model.labels, &cfg.eval.dataset)?;
            if task == TaskKind::Reasoning {
                entries.push(MetricEntry {
                    dataset: cfg.eval.dataset.clone(),
                    metric: "tagged_rate".into(),
                    value: workflow::tagged_rate(&results),
                });
            }
        }
        _ => return Err(Failure::Usage("eval needs exactly one of --predictions or --checkpoint".into())),
    }
    let report = aggregate(entries, &group_specs)?;
    let path = out.join("report.json");
    std::fs::write(&path, report.to_json()).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    print!("{}", report.to_table());
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_annotate(common: &Common, manifest: Option<PathBuf>, out: Option<PathBuf>) -> CmdResult {
    let cfg = common.load()?;
    let mut table = cfg.endpoints.clone();
    table.apply_env_overrides();
    let endpoints = Endpoints::from_table(&table)?;
    let manifest = manifest.unwrap_or_else(|| workflow::manifest_path(&cfg.corpus_dir));
    let samples = formats::read_manifest(&manifest)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("annotations"));
    let result = run_pipeline(&samples, &endpoints, cfg.parallelism)?;
    result.write(&out)?;
    println!("annotated: {}", result.records.len());
    println!("failed: {}", result.failures.len());
    for f in &result.failures {
        println!("  {}: {}", f.sample_id, f.error);
    }
    if !samples.is_empty() && result.records.is_empty() {
        return Err(Failure::Total(format!("all {} samples failed", samples.len())));
    }
    Ok(())
}

fn cmd_fuse(audio: &Path, global: &Path, temporal: &Path, params: &Path, out: &Path) -> CmdResult {
    let container = TensorContainer::load(params)?;
    let prefixed = container.with_prefix("prefusion.");
    let params = PreFusionParams::from_container(if prefixed.is_empty() { &container } else { &prefixed })?;
    let [u_a, u_glo, u_temp] = [audio, global, temporal].map(formats::load_tensor);
    let output = fuse(&u_a?, &u_glo?, &u_temp?, &params)?;
    create_dir(out)?;
    let weights = FeatureTensor::new(vec![output.weights.len()], output.weights.to_vec())?;
    for (name, t) in [("u_f", &output.u_f), ("f_attn", &output.f_attn), ("f_conv", &output.f_conv), ("weights", &weights)] {
        formats::save_tensor(&out.join(format!("{name}.mmef")), t)?;
    }
    println!("weights: {:?}", output.weights);
    Ok(())
}

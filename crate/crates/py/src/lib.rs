use std::collections::BTreeMap;
use std::path::PathBuf;

use emofuse::annotate::{run_pipeline, Endpoints};
use emofuse::backbone::{self, EmotionModel};
use emofuse::config::RunConfig;
use emofuse::formats::{self, AuFrameRecord, TaskKind, TensorContainer};
use emofuse::metrics::{self, EvalPair};
use emofuse::prefusion::{fuse as fuse_streams, PreFusionParams};
use emofuse::{synthgen, token_pipeline, workflow, Error, FeatureTensor};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<FeatureTensor> {
    FeatureTensor::from_rows(&rows).map_err(py_err)
}

fn to_rows(t: &FeatureTensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.row_len().max(1)).map(<[f64]>::to_vec).collect()
}

fn label_pairs(predictions: Vec<String>, truths: Vec<String>) -> PyResult<Vec<EvalPair>> {
    if predictions.len() != truths.len() {
        return Err(PyValueError::new_err("predictions and truths differ in length"));
    }
    Ok(predictions.iter().zip(&truths).enumerate().map(|(i, (p, t))| EvalPair::label(&i.to_string(), p, t)).collect())
}

fn task(name: &str) -> PyResult<TaskKind> {
    TaskKind::parse(name).map_err(py_err)
}

fn run_config(toml: Option<&str>) -> PyResult<RunConfig> {
    toml.map_or_else(|| Ok(RunConfig::default()), |t| RunConfig::from_toml(t).map_err(py_err))
}

/// Learning rate at `step` under linear warmup and cosine decay.
#[pyfunction]
#[pyo3(signature = (step, total_steps, warmup_steps, peak_lr=1e-4))]
fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak_lr: f64) -> f64 {
    let cfg = backbone::TrainConfig { total_steps, warmup_steps, peak_lr, ..Default::default() };
    backbone::lr_at(step, &cfg)
}

#[pyfunction]
fn adaptive_pool_1d(rows: Vec<Vec<f64>>, target: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&token_pipeline::adaptive_pool_1d(&matrix(rows)?, target).map_err(py_err)?))
}

/// Index of the frame with the largest summed AU intensity.
#[pyfunction]
fn select_peak_frame(frames: Vec<Vec<f64>>) -> PyResult<usize> {
    let frames = frames
        .into_iter()
        .enumerate()
        .map(|(i, f)| AuFrameRecord::new(i, f))
        .collect::<emofuse::Result<Vec<_>>>()
        .map_err(py_err)?;
    emofuse::annotate::select_peak_frame(&frames).map_err(py_err)
}

#[pyfunction]
fn hit_rate(predictions: Vec<String>, truths: Vec<String>) -> PyResult<f64> {
    metrics::hit_rate(&label_pairs(predictions, truths)?).map_err(py_err)
}

#[pyfunction]
fn weighted_f1(predictions: Vec<String>, truths: Vec<String>, labels: Vec<String>) -> PyResult<f64> {
    metrics::weighted_f1(&label_pairs(predictions, truths)?, &labels).map_err(py_err)
}

#[pyfunction]
fn mean_ap(scores: Vec<Vec<f64>>, truth: Vec<Vec<bool>>) -> PyResult<f64> {
    metrics::mean_ap(&scores, &truth).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (predicted, truth, synonyms=None))]
fn set_f_score(predicted: Vec<String>, truth: Vec<String>, synonyms: Option<BTreeMap<String, String>>) -> PyResult<f64> {
    metrics::set_f_score(&predicted, &truth, synonyms.as_ref()).map_err(py_err)
}

#[pyfunction]
fn build_judge_prompt(actual: &str, predicted: &str) -> PyResult<String> {
    metrics::build_judge_prompt(actual, predicted).map_err(py_err)
}

/// `(score, reason)` from a judge reply.
#[pyfunction]
fn parse_judge_response(text: &str) -> PyResult<(f64, String)> {
    let j = metrics::parse_judge_response(text).map_err(py_err)?;
    Ok((j.score, j.reason))
}

#[pyfunction]
fn mock_judge(prompt: &str) -> String {
    metrics::mock_judge_reply(prompt)
}

/// `(think, answer, tagged)` from generated text.
#[pyfunction]
fn parse_answer(text: &str) -> PyResult<(Option<String>, Option<String>, bool)> {
    let p = backbone::parse_answer(text).map_err(py_err)?;
    Ok((p.think, p.answer, p.tagged))
}

#[pyfunction]
#[pyo3(signature = (task_name, labels, seed=0))]
fn sample_instruction(task_name: &str, labels: Vec<String>, seed: u64) -> PyResult<String> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok(synthgen::sample_instruction(task(task_name)?, &labels, &mut rng))
}

/// Writes a synthetic corpus; returns `(manifest path, record count)`.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml=None))]
fn synthesize(out_dir: PathBuf, config_toml: Option<&str>) -> PyResult<(String, usize)> {
    let cfg = run_config(config_toml)?;
    let corpus = synthgen::generate(&cfg.synth_config(), &out_dir).map_err(py_err)?;
    Ok((corpus.manifest_path.display().to_string(), corpus.records.len()))
}

/// Pre-fusion of three `[T x d]` streams; returns the branch outputs and the
/// modality weights.
#[pyfunction]
fn fuse(
    audio: Vec<Vec<f64>>,
    global_: Vec<Vec<f64>>,
    temporal: Vec<Vec<f64>>,
    params_path: PathBuf,
) -> PyResult<BTreeMap<String, Vec<Vec<f64>>>> {
    let c = TensorContainer::load(&params_path).map_err(py_err)?;
    let prefixed = c.with_prefix("prefusion.");
    let params = PreFusionParams::from_container(if prefixed.is_empty() { &c } else { &prefixed }).map_err(py_err)?;
    let out = fuse_streams(&matrix(audio)?, &matrix(global_)?, &matrix(temporal)?, &params).map_err(py_err)?;
    Ok(BTreeMap::from([
        ("u_f".to_string(), to_rows(&out.u_f)),
        ("f_attn".to_string(), to_rows(&out.f_attn)),
        ("f_conv".to_string(), to_rows(&out.f_conv)),
        ("weights".to_string(), vec![out.weights.to_vec()]),
    ]))
}

/// Annotates a manifest; returns `(records written, failed sample ids)`.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, parallelism=1, config_toml=None))]
fn annotate(manifest: PathBuf, out_dir: PathBuf, parallelism: usize, config_toml: Option<&str>) -> PyResult<(usize, Vec<String>)> {
    let cfg = run_config(config_toml)?;
    let mut table = cfg.endpoints.clone();
    table.apply_env_overrides();
    let endpoints = Endpoints::from_table(&table).map_err(py_err)?;
    let samples = formats::read_manifest(&manifest).map_err(py_err)?;
    let out = run_pipeline(&samples, &endpoints, parallelism).map_err(py_err)?;
    out.write(&out_dir).map_err(py_err)?;
    Ok((out.records.len(), out.failures.into_iter().map(|f| f.sample_id).collect()))
}

/// A trained model loaded from a checkpoint.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: EmotionModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = backbone::load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.clone()
    }

    #[getter]
    fn trainable_parameters(&self) -> usize {
        self.inner.trainable_parameters()
    }

    /// Greedy predictions for one split: `(id, raw text, answer)` triples.
    #[pyo3(signature = (corpus_dir, split="test", task_name="recognition", max_tokens=48, seed=0))]
    fn predict(
        &self,
        corpus_dir: PathBuf,
        split: &str,
        task_name: &str,
        max_tokens: usize,
        seed: u64,
    ) -> PyResult<Vec<(String, String, Option<String>)>> {
        let records = workflow::load_corpus(&corpus_dir).map_err(py_err)?;
        let samples = workflow::prepare_split(&records, split, &self.inner.pipeline).map_err(py_err)?;
        let results =
            workflow::predict_all(&self.inner, &samples, task(task_name)?, max_tokens, seed, 1).map_err(py_err)?;
        Ok(samples.iter().zip(results).map(|(s, g)| (s.id.clone(), g.raw, g.answer)).collect())
    }
}

/// Default run configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml()
}

#[pymodule]
pub fn emofuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_pool_1d, m)?)?;
    m.add_function(wrap_pyfunction!(select_peak_frame, m)?)?;
    m.add_function(wrap_pyfunction!(hit_rate, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    m.add_function(wrap_pyfunction!(mean_ap, m)?)?;
    m.add_function(wrap_pyfunction!(set_f_score, m)?)?;
    m.add_function(wrap_pyfunction!(build_judge_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_judge_response, m)?)?;
    m.add_function(wrap_pyfunction!(mock_judge, m)?)?;
    m.add_function(wrap_pyfunction!(parse_answer, m)?)?;
    m.add_function(wrap_pyfunction!(sample_instruction, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(annotate, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}

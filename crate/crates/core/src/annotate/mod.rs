//! Multimodal annotation: peak-frame selection, clue collection from
//! describer endpoints, consolidation, and a bounded-parallel batch runner.

mod client;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use client::{
    mock_consolidation, Client, DescribeRequest, DescribeResponse, Describer, DownDescriber, EndpointConfig,
    EndpointTable, Endpoints, HttpDescriber, MockDescriber, Reply, Role, ScriptedDescriber,
};

use crate::error::{Error, Result};
use crate::formats::{self, AuFrameRecord, SampleRecord};

/// Index of the frame with the largest summed AU intensity; the first such
/// frame wins ties.
pub fn select_peak_frame(frames: &[AuFrameRecord]) -> Result<usize> {
    let first = frames.first().ok_or(Error::EmptySequence)?;
    let mut best = (0, first.salience());
    for (i, f) in frames.iter().enumerate().skip(1) {
        let s = f.salience();
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Clues gathered for one sample before consolidation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialRecord {
    pub sample_id: String,
    pub peak_frame: usize,
    pub c_ved: Option<String>,
    pub c_vod: Option<String>,
    pub c_atd: Option<String>,
    pub c_ls: Option<String>,
    pub label: String,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub peak_frame: usize,
    pub c_ved: String,
    pub c_vod: String,
    pub c_atd: String,
    pub c_ls: String,
    pub c_md: String,
    pub label: String,
}

fn peak_frame_for(sample: &SampleRecord) -> Result<usize> {
    let frames = formats::read_au_file(&sample.au_path())?;
    let peak = select_peak_frame(&frames)?;
    let video = formats::load_tensor(&sample.video_path)?;
    let clip_frames = video.dims().first().copied().unwrap_or(0);
    if frames.len() != clip_frames {
        return Err(Error::format(
            sample.au_path(),
            format!("{} AU frames for a {clip_frames}-frame clip", frames.len()),
        ));
    }
    Ok(peak)
}

/// Locates the peak frame and asks the three describers about it. Nothing is
/// returned unless every describer answers.
pub fn collect_clues(sample: &SampleRecord, endpoints: &Endpoints) -> Result<PartialRecord> {
    let peak = peak_frame_for(sample)?;
    let frame_ref = format!("{}#frame={peak}", sample.video_path.display());
    let audio_ref = sample.audio_path.display().to_string();
    let mut retries = 0;
    let mut ask = |role: Role, payload: &str| -> Result<String> {
        let reply = endpoints.client(role).call(&sample.id, payload)?;
        retries += reply.retries;
        Ok(reply.text)
    };
    let c_ved = ask(Role::VisualExpression, &frame_ref)?;
    let c_vod = ask(Role::VisualObjective, &frame_ref)?;
    let c_atd = ask(Role::AudioTone, &audio_ref)?;
    Ok(PartialRecord {
        sample_id: sample.id.clone(),
        peak_frame: peak,
        c_ved: Some(c_ved),
        c_vod: Some(c_vod),
        c_atd: Some(c_atd),
        c_ls: Some(sample.transcript.clone()),
        label: sample.label.clone(),
        retries,
    })
}

/// Consolidation request body: one `key: value` line per clue.
pub fn consolidation_payload(ls: &str, ved: &str, vod: &str, atd: &str, label: &str) -> String {
    let flat = |s: &str| s.replace(['\n', '\r'], " ");
    format!(
        "subtitle: {}\nexpression: {}\nobjective: {}\ntone: {}\nlabel: {}",
        flat(ls),
        flat(ved),
        flat(vod),
        flat(atd),
        flat(label)
    )
}

pub fn consolidate(partial: &PartialRecord, endpoints: &Endpoints) -> Result<AnnotationRecord> {
    let c_ls = partial.c_ls.clone().ok_or(Error::MissingClue("c_ls"))?;
    let c_ved = partial.c_ved.clone().ok_or(Error::MissingClue("c_ved"))?;
    let c_vod = partial.c_vod.clone().ok_or(Error::MissingClue("c_vod"))?;
    let c_atd = partial.c_atd.clone().ok_or(Error::MissingClue("c_atd"))?;
    let payload = consolidation_payload(&c_ls, &c_ved, &c_vod, &c_atd, &partial.label);
    let reply = endpoints.client(Role::Consolidator).call(&partial.sample_id, &payload)?;
    if reply.text.trim().is_empty() {
        return Err(Error::EmptyConsolidation);
    }
    Ok(AnnotationRecord {
        sample_id: partial.sample_id.clone(),
        peak_frame: partial.peak_frame,
        c_ved,
        c_vod,
        c_atd,
        c_ls,
        c_md: reply.text,
        label: partial.label.clone(),
    })
}

pub fn annotate_sample(sample: &SampleRecord, endpoints: &Endpoints) -> Result<AnnotationRecord> {
    consolidate(&collect_clues(sample, endpoints)?, endpoints)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOutput {
    /// Successful records in manifest order.
    pub records: Vec<AnnotationRecord>,
    /// Failed samples in manifest order.
    pub failures: Vec<Failure>,
}

impl PipelineOutput {
    pub fn records_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    pub fn failures_tsv(&self) -> String {
        let mut out = String::from("sample_id\terror\n");
        for f in &self.failures {
            out += &format!("{}\t{}\n", f.sample_id, f.error.replace(['\t', '\n'], " "));
        }
        out
    }

    /// Writes `annotations.jsonl` and `failures.tsv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("annotations.jsonl", self.records_jsonl()), ("failures.tsv", self.failures_tsv())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Annotates every sample with at most `parallelism` workers. A failing
/// sample is reported and never aborts the batch.
pub fn run_pipeline(samples: &[SampleRecord], endpoints: &Endpoints, parallelism: usize) -> Result<PipelineOutput> {
    if parallelism == 0 {
        return Err(Error::InvalidArgument("parallelism must be at least 1".into()));
    }
    let slots: Vec<Mutex<Option<Result<AnnotationRecord>>>> = samples.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(samples.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= samples.len() {
                    break;
                }
                let outcome = annotate_sample(&samples[i], endpoints);
                if let Err(e) = &outcome {
                    log::warn!("annotation of {} failed: {e}", samples[i].id);
                }
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });
    let mut out = PipelineOutput::default();
    for (sample, slot) in samples.iter().zip(slots) {
        match slot.into_inner().expect("slot lock").expect("every sample is visited") {
            Ok(r) => out.records.push(r),
            Err(e) => out.failures.push(Failure { sample_id: sample.id.clone(), error: e.to_string() }),
        }
    }
    Ok(out)
}

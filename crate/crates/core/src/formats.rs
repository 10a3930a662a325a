//! On-disk formats shared by every subcommand.
//!
//! MMEF tensor block, all integers little-endian:
//!
//! ```text
//! b"MMEF" | u32 version = 1 | u32 ndim | ndim x u32 dims | prod(dims) x f32 (row-major)
//! ```
//!
//! A container is `u32 count` followed, per tensor, by `u32 name_len`, the
//! UTF-8 name bytes and a full tensor block.
//!
//! The sample manifest is UTF-8, tab-separated, one record per line and no
//! header: `id, audio_path, video_path, global_path, transcript, label, task,
//! split, reasoning_target`. The last field may be empty. Tabs, newlines and
//! backslashes inside fields are backslash-escaped.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

pub const MAGIC: [u8; 4] = *b"MMEF";
pub const VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Serializes a tensor block. Values are narrowed to f32.
pub fn encode_tensor(t: &FeatureTensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Reads one tensor block. The error string describes what was malformed.
pub fn decode_tensor(r: &mut impl Read) -> std::result::Result<FeatureTensor, String> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| format!("missing magic: {e}"))?;
    if magic != MAGIC {
        return Err(format!("bad magic {magic:02x?}"));
    }
    let version = read_u32(r).map_err(|e| e.to_string())?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let ndim = read_u32(r).map_err(|e| e.to_string())? as usize;
    if ndim == 0 || ndim > 16 {
        return Err(format!("implausible ndim {ndim}"));
    }
    let dims = (0..ndim)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 30)
        .ok_or_else(|| format!("implausible dims {dims:?}"))?;
    let mut raw = vec![0u8; len * 4];
    r.read_exact(&mut raw).map_err(|e| format!("truncated data: {e}"))?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FeatureTensor::new(dims, data).map_err(|e| e.to_string())
}

pub fn save_tensor(path: &Path, t: &FeatureTensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * t.len());
    encode_tensor(t, &mut buf);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<FeatureTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = &bytes[..];
    let t = decode_tensor(&mut cur).map_err(|m| Error::format(path, m))?;
    if !cur.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes", cur.len())));
    }
    Ok(t)
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<(String, FeatureTensor)>,
}

/// Location of one tensor inside an encoded container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerEntry {
    pub name: String,
    pub dims: Vec<usize>,
    /// Byte offset of the tensor block (its magic) from the start of the file.
    pub offset: usize,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor, replacing any earlier tensor with the same name.
    pub fn insert(&mut self, name: impl Into<String>, t: FeatureTensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&FeatureTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`get`](Self::get) but reports the missing name.
    pub fn require(&self, name: &str) -> Result<&FeatureTensor> {
        self.get(name)
            .ok_or_else(|| Error::Shape(format!("container has no tensor named `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> TensorContainer {
        TensorContainer {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Merges `other` into `self`, prefixing its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: TensorContainer) {
        for (n, t) in other.entries {
            self.insert(format!("{prefix}{n}"), t);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        self.encode_with_manifest().0
    }

    /// Encodes the container and reports where each tensor block starts.
    pub fn encode_with_manifest(&self) -> (Vec<u8>, Vec<ContainerEntry>) {
        let mut out = Vec::new();
        let mut manifest = Vec::with_capacity(self.entries.len());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            manifest.push(ContainerEntry { name: name.clone(), dims: t.dims().to_vec(), offset: out.len() });
            encode_tensor(t, &mut out);
        }
        (out, manifest)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = bytes;
        let count = read_u32(&mut cur).map_err(|e| format!("missing tensor count: {e}"))?;
        let mut entries = Vec::new();
        for i in 0..count {
            let len = read_u32(&mut cur).map_err(|e| format!("tensor {i}: {e}"))? as usize;
            if len > cur.len() {
                return Err(format!("tensor {i}: name length {len} exceeds file"));
            }
            let (name, rest) = cur.split_at(len);
            let name = std::str::from_utf8(name).map_err(|e| format!("tensor {i}: {e}"))?.to_string();
            cur = rest;
            let t = decode_tensor(&mut cur).map_err(|e| format!("tensor `{name}`: {e}"))?;
            entries.push((name, t));
        }
        if !cur.is_empty() {
            return Err(format!("{} trailing bytes", cur.len()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|m| Error::format(path, m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Recognition,
    Reasoning,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Recognition => "recognition",
            TaskKind::Reasoning => "reasoning",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "recognition" => Ok(TaskKind::Recognition),
            "reasoning" => Ok(TaskKind::Reasoning),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }
}

/// One tri-modal sample as listed in the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub audio_path: PathBuf,
    pub video_path: PathBuf,
    pub global_path: PathBuf,
    pub transcript: String,
    /// One label, or several joined with `|` for multi-label samples.
    pub label: String,
    pub task: TaskKind,
    pub split: String,
    pub reasoning_target: Option<String>,
}

impl SampleRecord {
    pub fn labels(&self) -> Vec<&str> {
        self.label.split('|').collect()
    }

    /// Per-frame AU intensity file, stored next to the video features.
    pub fn au_path(&self) -> PathBuf {
        let name = self.video_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let stem = name.strip_suffix(".video.mmef").unwrap_or(name);
        self.video_path.with_file_name(format!("{stem}.au.csv"))
    }
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

pub fn format_manifest_line(r: &SampleRecord) -> String {
    [
        escape_field(&r.id),
        escape_field(&r.audio_path.to_string_lossy()),
        escape_field(&r.video_path.to_string_lossy()),
        escape_field(&r.global_path.to_string_lossy()),
        escape_field(&r.transcript),
        escape_field(&r.label),
        r.task.as_str().to_string(),
        escape_field(&r.split),
        escape_field(r.reasoning_target.as_deref().unwrap_or("")),
    ]
    .join("\t")
}

pub fn parse_manifest_line(line: &str) -> std::result::Result<SampleRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 8 && fields.len() != 9 {
        return Err(format!("expected 8 or 9 tab-separated fields, got {}", fields.len()));
    }
    let f = |i: usize| unescape_field(fields[i]);
    let reasoning = match fields.get(8) {
        Some(s) if !s.is_empty() => Some(unescape_field(s)?),
        _ => None,
    };
    Ok(SampleRecord {
        id: f(0)?,
        audio_path: f(1)?.into(),
        video_path: f(2)?.into(),
        global_path: f(3)?.into(),
        transcript: f(4)?,
        label: f(5)?,
        task: TaskKind::parse(fields[6]).map_err(|e| e.to_string())?,
        split: f(7)?,
        reasoning_target: reasoning,
    })
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format_manifest_line(r));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a manifest; relative feature paths are resolved against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut r = parse_manifest_line(&line).map_err(|m| Error::format(path, format!("line {}: {m}", i + 1)))?;
        for p in [&mut r.audio_path, &mut r.video_path, &mut r.global_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        records.push(r);
    }
    Ok(records)
}

/// One frame of facial Action Unit intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct AuFrameRecord {
    pub frame_index: usize,
    pub au_intensities: Vec<f64>,
}

impl AuFrameRecord {
    pub fn new(frame_index: usize, au_intensities: Vec<f64>) -> Result<Self> {
        if au_intensities.is_empty() {
            return Err(Error::InvalidArgument("frame has no AU intensities".into()));
        }
        if au_intensities.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "frame {frame_index}: AU intensities must be finite and non-negative"
            )));
        }
        Ok(Self { frame_index, au_intensities })
    }

    /// Summed intensity, the frame's emotional salience.
    pub fn salience(&self) -> f64 {
        self.au_intensities.iter().sum()
    }
}

/// Parses comma-separated AU rows: one line per frame, one column per AU.
pub fn parse_au_rows(text: &str) -> std::result::Result<Vec<AuFrameRecord>, String> {
    let mut frames = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let values = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("frame {i}: `{}`: {e}", v.trim())))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => return Err(format!("frame {i}: expected {w} AUs, got {}", values.len())),
            _ => {}
        }
        frames.push(AuFrameRecord::new(i, values).map_err(|e| e.to_string())?);
    }
    Ok(frames)
}

pub fn read_au_file(path: &Path) -> Result<Vec<AuFrameRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_au_rows(&text).map_err(|m| Error::format(path, m))
}

pub fn format_au_rows(frames: &[AuFrameRecord]) -> String {
    let mut out = String::new();
    for f in frames {
        let row: Vec<String> = f.au_intensities.iter().map(|v| format!("{v:.4}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// One optimizer step of a loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub const TRACE_HEADER: &str = "step\tlr\tloss";

pub fn write_loss_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&format!("{}\t{:e}\t{:.9}\n", r.step, r.lr, r.loss));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::format(path, "missing loss trace header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::format(path, format!("line {}: malformed record", i + 2));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(TraceRecord {
                step: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// A model prediction for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    /// Label text; several labels are joined with `|`.
    pub prediction: String,
    /// Optional per-class scores, `label:score` pairs.
    pub scores: Option<Vec<(String, f64)>>,
}

pub fn format_prediction_line(p: &PredictionRecord) -> String {
    let mut line = format!("{}\t{}", escape_field(&p.id), escape_field(&p.prediction));
    if let Some(scores) = &p.scores {
        let s: Vec<String> = scores.iter().map(|(l, v)| format!("{l}:{v}")).collect();
        line.push('\t');
        line.push_str(&s.join(","));
    }
    line
}

pub fn parse_prediction_line(line: &str) -> std::result::Result<PredictionRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if !(2..=3).contains(&fields.len()) {
        return Err(format!("expected 2 or 3 fields, got {}", fields.len()));
    }
    let scores = match fields.get(2) {
        Some(s) if !s.is_empty() => Some(
            s.split(',')
                .map(|pair| {
                    let (l, v) = pair.rsplit_once(':').ok_or_else(|| format!("bad score `{pair}`"))?;
                    let v: f64 = v.parse().map_err(|_| format!("bad score `{pair}`"))?;
                    Ok((l.to_string(), v))
                })
                .collect::<std::result::Result<Vec<_>, String>>()?,
        ),
        _ => None,
    };
    Ok(PredictionRecord { id: unescape_field(fields[0])?, prediction: unescape_field(fields[1])?, scores })
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&format_prediction_line(p));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| parse_prediction_line(l).map_err(|m| Error::format(path, format!("line {}: {m}", i + 1))))
        .collect()
}

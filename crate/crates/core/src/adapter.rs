//! Modal adapters and multimodal prompt assembly.
//!
//! Every feature stream gets its own affine projection into the backbone
//! embedding space. Projected tokens are interleaved with text following
//!
//! ```text
//! [Vid] <fusion> <image> <video> <audio> [Vid] The person in the video says: <transcript> <task> <instruction>
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::formats::{TaskKind, TensorContainer};
use crate::linalg::Affine;
use crate::tensor::FeatureTensor;
use crate::tokenizer::{Vocab, REASONING, RECOGNITION, VID};

pub const SAYS_PREFIX: &str = "The person in the video says: ";

/// Feature streams in template order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Fusion,
    Image,
    Video,
    Audio,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::Fusion, Stream::Image, Stream::Video, Stream::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Fusion => "fusion",
            Stream::Image => "image",
            Stream::Video => "video",
            Stream::Audio => "audio",
        }
    }
}

pub fn project(u: &FeatureTensor, sigma: &Affine) -> Result<FeatureTensor> {
    sigma.project(u)
}

/// The four stream projections; all share the output dimension `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    /// Indexed by [`Stream::index`].
    pub maps: [Affine; 4],
}

impl AdapterSet {
    /// `input_dims` is indexed by [`Stream::index`].
    pub fn init(input_dims: [usize; 4], embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self { maps: input_dims.map(|d| Affine::init_uniform(d, embed_dim, rng)) }
    }

    pub fn new(maps: [Affine; 4]) -> Result<Self> {
        let e = maps[0].out_dim;
        if maps.iter().any(|m| m.out_dim != e) {
            return Err(Error::Shape("adapter maps must share their output dimension".into()));
        }
        Ok(Self { maps })
    }

    pub fn embed_dim(&self) -> usize {
        self.maps[0].out_dim
    }

    pub fn map(&self, s: Stream) -> &Affine {
        &self.maps[s.index()]
    }

    pub fn zeros_like(&self) -> Self {
        Self { maps: self.maps.each_ref().map(|m| Affine::zeros(m.in_dim, m.out_dim)) }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.maps.iter_mut().flat_map(|m| [&mut m.weight[..], &mut m.bias[..]]).collect()
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        Stream::ALL
            .iter()
            .zip(&self.maps)
            .flat_map(|(s, m)| {
                [
                    (format!("{}.weight", s.name()), vec![m.out_dim, m.in_dim], &m.weight[..]),
                    (format!("{}.bias", s.name()), vec![m.out_dim], &m.bias[..]),
                ]
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.maps.iter().map(|m| m.weight.len() + m.bias.len()).sum()
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        for (name, dims, v) in self.tensors() {
            c.insert(name, FeatureTensor::new(dims, v.to_vec()).expect("finite parameters"));
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let load = |s: Stream| -> Result<Affine> {
            let w = c.require(&format!("{}.weight", s.name()))?;
            let b = c.require(&format!("{}.bias", s.name()))?;
            let (out_dim, in_dim) = w.as_matrix()?;
            Affine::from_parts(in_dim, out_dim, w.data().to_vec(), b.data().to_vec())
        };
        Self::new([load(Stream::Fusion)?, load(Stream::Image)?, load(Stream::Video)?, load(Stream::Audio)?])
    }
}

/// Text tag for a task kind.
pub fn task_token(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Recognition => RECOGNITION,
        TaskKind::Reasoning => REASONING,
    }
}

/// Inputs of one multimodal prompt. A `None` stream is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub fusion_tokens: Option<FeatureTensor>,
    pub image_tokens: Option<FeatureTensor>,
    pub video_tokens: Option<FeatureTensor>,
    pub audio_tokens: Option<FeatureTensor>,
    pub transcript: String,
    /// `recognition` or `reasoning`.
    pub task_identifier: String,
    pub instruction: String,
}

impl PromptBundle {
    fn stream(&self, s: Stream) -> Option<&FeatureTensor> {
        match s {
            Stream::Fusion => self.fusion_tokens.as_ref(),
            Stream::Image => self.image_tokens.as_ref(),
            Stream::Video => self.video_tokens.as_ref(),
            Stream::Audio => self.audio_tokens.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Element {
    Text(u32),
    /// Row `row` of a projected stream.
    Embedding { stream: Stream, row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanKind {
    Prompt,
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

/// Interleaved embedding / text stream fed to the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub elements: Vec<Element>,
    /// Contiguous, non-overlapping spans covering every element.
    pub spans: Vec<Span>,
    /// Projected streams `[n x E]`, indexed by [`Stream::index`].
    pub streams: [Option<FeatureTensor>; 4],
    pub embed_dim: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn embedding_count(&self) -> usize {
        self.elements.iter().filter(|e| matches!(e, Element::Embedding { .. })).count()
    }

    pub fn text_ids(&self) -> Vec<u32> {
        self.elements
            .iter()
            .filter_map(|e| match e {
                Element::Text(id) => Some(*id),
                _ => None,
            })
            .collect()
    }

    /// Embedding vector of an element drawn from a stream.
    pub fn embedding(&self, stream: Stream, row: usize) -> &[f64] {
        self.streams[stream.index()].as_ref().expect("stream present").row(row)
    }

    /// Positions inside response spans.
    pub fn response_positions(&self) -> Vec<usize> {
        self.spans.iter().filter(|s| s.kind == SpanKind::Response).flat_map(|s| s.start..s.end).collect()
    }

    /// Appends response tokens as a new span.
    pub fn push_response(&mut self, ids: &[u32]) {
        let start = self.elements.len();
        self.elements.extend(ids.iter().map(|&i| Element::Text(i)));
        if !ids.is_empty() {
            self.spans.push(Span { start, end: self.elements.len(), kind: SpanKind::Response });
        }
    }

    /// Prompt-only copy (drops response spans).
    pub fn prompt_only(&self) -> TokenSequence {
        let end = self.spans.iter().filter(|s| s.kind == SpanKind::Prompt).map(|s| s.end).max().unwrap_or(0);
        TokenSequence {
            elements: self.elements[..end].to_vec(),
            spans: self.spans.iter().filter(|s| s.kind == SpanKind::Prompt).copied().collect(),
            streams: self.streams.clone(),
            embed_dim: self.embed_dim,
        }
    }
}

/// Lays out a bundle in template order; the whole sequence is prompt.
pub fn assemble_prompt(bundle: &PromptBundle, vocab: &Vocab) -> Result<TokenSequence> {
    let task = TaskKind::parse(&bundle.task_identifier)?;
    let mut embed_dim = None;
    for s in Stream::ALL {
        if let Some(t) = bundle.stream(s) {
            let (_, e) = t.as_matrix()?;
            match embed_dim {
                None => embed_dim = Some(e),
                Some(e0) if e0 != e => {
                    return Err(Error::Shape(format!("{} tokens have width {e}, expected {e0}", s.name())))
                }
                _ => {}
            }
        }
    }
    let mut elements = vec![Element::Text(vocab.special(VID))];
    for s in Stream::ALL {
        if let Some(t) = bundle.stream(s) {
            elements.extend((0..t.rows()).map(|row| Element::Embedding { stream: s, row }));
        }
    }
    elements.push(Element::Text(vocab.special(VID)));
    let text = |s: &str| vocab.encode(s).into_iter().map(Element::Text);
    elements.extend(text(SAYS_PREFIX));
    elements.extend(text(&bundle.transcript));
    elements.push(Element::Text(vocab.special(task_token(task))));
    elements.extend(text(&bundle.instruction));
    let spans = vec![Span { start: 0, end: elements.len(), kind: SpanKind::Prompt }];
    Ok(TokenSequence {
        elements,
        spans,
        streams: Stream::ALL.map(|s| bundle.stream(s).cloned()),
        embed_dim: embed_dim.unwrap_or(0),
    })
}

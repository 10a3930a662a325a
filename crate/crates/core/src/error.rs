use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty sequence")]
    EmptySequence,
    #[error("grid exceeds frame: {grid}x{grid} grid on a {height}x{width} frame")]
    GridExceedsFrame {
        grid: usize,
        height: usize,
        width: usize,
    },
    #[error("expected single token, got {0} rows")]
    ExpectedSingleToken(usize),
    #[error("unaligned streams: {0}")]
    UnalignedStreams(String),
    #[error("attention overflow: modality weights are not finite")]
    AttentionOverflow,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown task identifier `{0}`")]
    UnknownTask(String),
    #[error("empty response span")]
    EmptyResponse,
    #[error("stage mismatch: {0}")]
    StageMismatch(String),
    #[error("malformed reasoning target for sample `{0}`: needs <think> and <answer> spans")]
    MalformedTarget(String),
    #[error("context overflow: {needed} positions needed, context is {context}")]
    ContextOverflow { needed: usize, context: usize },
    #[error("malformed answer format: {0}")]
    MalformedFormat(String),
    #[error("{role} unavailable: {reason}")]
    EndpointUnavailable { role: String, reason: String },
    #[error("empty consolidation")]
    EmptyConsolidation,
    #[error("missing clue field {0}")]
    MissingClue(&'static str),
    #[error("empty input")]
    EmptyInput,
    #[error("label kind mismatch: {0}")]
    KindMismatch(String),
    #[error("label `{0}` is not in the label set")]
    UnknownLabel(String),
    #[error("malformed judgment: {0}")]
    MalformedJudgment(String),
    #[error("missing group member `{0}`")]
    MissingMember(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed wave file: {0}")]
    Format(String),
    #[error("unsupported channel count {0}, only mono input is accepted")]
    UnsupportedChannels(u16),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("waveform of {samples} samples is shorter than one analysis window ({window})")]
    EmptyTrack { samples: usize, window: usize },
    #[error("track has no defined frames to normalise")]
    DegenerateTrack,
    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),
    #[error("invalid token {token} for codebook of size {size}")]
    InvalidToken { token: usize, size: usize },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of {got} frames exceeds the model limit of {max}")]
    SequenceTooLong { got: usize, max: usize },
    #[error("loss is undefined: {0}")]
    UndefinedLoss(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: loss {loss} vs initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("layer {layer} out of range 1..={num_layers}")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("invalid span {start}..{end} for sequence of {len} frames")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training labels cover a single class")]
    DegenerateLabels,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("report schema error: {0}")]
    Schema(String),
    #[error("missing artifact from stage `{stage}`: {path}")]
    MissingArtifact { stage: String, path: PathBuf },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("plot error: {0}")]
    Plot(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

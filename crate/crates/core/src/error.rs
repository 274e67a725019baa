use std::io;

use thiserror::Error;

/// Every failure the codec library can report.
#[derive(Debug, Error)]
pub enum CmrlError {
    #[error("input is silent (variance {0:e} below 1e-12)")]
    SilentInput(f64),
    #[error("signal of {len} samples is shorter than one {frame}-sample frame")]
    TooShort { len: usize, frame: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("frame {0} has the wrong window state for this operation")]
    WindowState(usize),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("unsupported sample rate {0} Hz (codec runs at 16000 Hz)")]
    SampleRate(u32),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("unstable synthesis filter")]
    UnstableFilter,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("interlacing needs a channel count divisible by {factor}, got {channels}")]
    OddChannels { channels: usize, factor: usize },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("symbol {0} has no code in the table")]
    UnknownSymbol(usize),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    VersionMismatch(u16),
    #[error("truncated stream: {0}")]
    TruncatedStream(String),
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("stream does not match model: {0}")]
    ModelMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("rate control did not reach the target range: {0}")]
    RateControl(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CmrlError>;

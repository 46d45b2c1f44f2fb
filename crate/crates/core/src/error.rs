use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report.
///
/// Variants are grouped by the exit code the CLI maps them to; see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: unsupported audio format: {1}")]
    UnsupportedFormat(PathBuf, String),
    #[error("{0}: corrupt file: {1}")]
    CorruptFile(PathBuf, String),
    #[error("{0}: audio contains no samples")]
    EmptyAudio(PathBuf),
    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("frame count mismatch: expected {expected} frames, file has {found}")]
    FrameCountMismatch { expected: usize, found: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: span end {end} is not after start {start}")]
    NegativeSpan { line: usize, start: f64, end: f64 },
    #[error("clip {clip}: annotations [{a_start}, {a_end}) and [{b_start}, {b_end}) overlap")]
    Overlap {
        clip: String,
        a_start: f64,
        a_end: f64,
        b_start: f64,
        b_end: f64,
    },
    #[error("clip {clip}: annotation ends at {end}s, past clip end {duration}s")]
    SpanPastEnd { clip: String, end: f64, duration: f64 },
    #[error("unknown call type {0:?}")]
    UnknownClass(String),
    #[error("corpus has {0} clips, at least 3 are required")]
    TooFewClips(usize),
    #[error("clip {clip}: missing file {path}")]
    MissingFile { clip: String, path: PathBuf },
    #[error("clip {clip}: {features} feature rows but {labels} label frames")]
    Alignment {
        clip: String,
        features: usize,
        labels: usize,
    },
    #[error("unknown clip {0}")]
    UnknownClip(String),
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no positive frames; precision-recall curve undefined")]
    NoPositives,
    #[error("feature kind mismatch: checkpoint uses {checkpoint}, corpus uses {corpus}")]
    FeatureKindMismatch { checkpoint: String, corpus: String },
    #[error("class arity mismatch: expected {expected} classes, checkpoint has {found}")]
    ClassArityMismatch { expected: usize, found: usize },
    #[error("non-finite loss at epoch {epoch} on clip {clip}")]
    Divergence { epoch: usize, clip: String },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Variant name, used as the machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::UnsupportedFormat(..) => "UnsupportedFormat",
            Error::CorruptFile(..) => "CorruptFile",
            Error::EmptyAudio(_) => "EmptyAudio",
            Error::BadMagic { .. } => "BadMagic",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::FrameCountMismatch { .. } => "FrameCountMismatch",
            Error::Parse { .. } => "ParseError",
            Error::NegativeSpan { .. } => "NegativeSpan",
            Error::Overlap { .. } => "OverlapError",
            Error::SpanPastEnd { .. } => "SpanPastEnd",
            Error::UnknownClass(_) => "UnknownClass",
            Error::TooFewClips(_) => "TooFewClips",
            Error::MissingFile { .. } => "MissingFile",
            Error::Alignment { .. } => "AlignmentError",
            Error::UnknownClip(_) => "UnknownClip",
            Error::BadConfig(_) => "BadConfig",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::EmptySplit(_) => "EmptySplit",
            Error::IncompatibleCheckpoint(_) => "IncompatibleCheckpoint",
            Error::LengthMismatch(_) => "LengthMismatch",
            Error::NoPositives => "NoPositives",
            Error::FeatureKindMismatch { .. } => "FeatureKindMismatch",
            Error::ClassArityMismatch { .. } => "ClassArityMismatch",
            Error::Divergence { .. } => "DivergenceError",
            Error::Json { .. } => "JsonError",
        }
    }

    /// Process exit code: 2 usage, 3 data, 4 numeric divergence, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::MissingFile { .. } => 5,
            Error::Divergence { .. } => 4,
            Error::InvalidArgument(_) | Error::BadConfig(_) => 2,
            _ => 3,
        }
    }
}

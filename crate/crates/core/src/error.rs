use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // stroke geometry
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("non-finite coordinate at stroke {stroke}, point {point}")]
    NonFiniteCoordinate { stroke: usize, point: usize },
    #[error("degenerate canvas {height}x{width}: both sides must be at least 2 pixels")]
    DegenerateCanvas { height: usize, width: usize },
    #[error("rdp epsilon must be non-negative, got {0}")]
    NegativeEpsilon(f64),
    #[error("invalid stroke sequence: {0}")]
    InvalidSequence(String),

    // rendering
    #[error("coordinate ({x}, {y}) at point {index} lies outside the unit canvas")]
    UnnormalizedInput { index: usize, x: f64, y: f64 },
    #[error("invalid raster config: {0}")]
    InvalidRasterConfig(String),
    #[error("batch item {index}: {source}")]
    BatchItem {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    // data
    #[error("input file is empty")]
    EmptyFile,
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unknown class name {0:?}")]
    UnknownClassName(String),
    #[error("empty alphabet")]
    EmptyAlphabet,
    #[error("too few classes: have {available}, need more than {requested}")]
    TooFewClasses { available: usize, requested: usize },
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    // models
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing targets: {0}")]
    MissingTargets(String),
    #[error("mask selects no valid step")]
    EmptyMask,
    #[error("sequence of {len} steps (+1 class token) exceeds {max} positions")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),

    // losses
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    // training
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss diverged at epoch {epoch}, step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    DivergedLoss {
        epoch: usize,
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    // downstream
    #[error("checkpoint modality mismatch: {0}")]
    ModalityMismatch(String),
    #[error("unknown depth {0}")]
    UnknownDepth(String),
    #[error("class mismatch: {0}")]
    ClassMismatch(String),
    #[error("insufficient class samples: {0}")]
    InsufficientClassSamples(String),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("label fraction {fraction} leaves fewer than one sample per class")]
    FractionTooSmall { fraction: f64 },
    #[error("image height {found} does not match configured height {expected}")]
    BadAspect { found: usize, expected: usize },
    #[error("empty feature sequence")]
    EmptyFeatures,
    #[error("lexicon mode requested with an empty lexicon")]
    EmptyLexicon,

    #[error("usage: {0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable name of the variant, used in CLI messages and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyInput(_) => "EmptyInput",
            Error::NonFiniteCoordinate { .. } => "NonFiniteCoordinate",
            Error::DegenerateCanvas { .. } => "DegenerateCanvas",
            Error::NegativeEpsilon(_) => "NegativeEpsilon",
            Error::InvalidSequence(_) => "InvalidSequence",
            Error::UnnormalizedInput { .. } => "UnnormalizedInput",
            Error::InvalidRasterConfig(_) => "InvalidRasterConfig",
            Error::BatchItem { .. } => "BatchItem",
            Error::EmptyFile => "EmptyFile",
            Error::MalformedRecord { .. } => "MalformedRecord",
            Error::UnknownClassName(_) => "UnknownClassName",
            Error::EmptyAlphabet => "EmptyAlphabet",
            Error::TooFewClasses { .. } => "TooFewClasses",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::MissingTargets(_) => "MissingTargets",
            Error::EmptyMask => "EmptyMask",
            Error::SequenceTooLong { .. } => "SequenceTooLong",
            Error::InvalidModelConfig(_) => "InvalidModelConfig",
            Error::LengthMismatch(_) => "LengthMismatch",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::EmptyDataset => "EmptyDataset",
            Error::DivergedLoss { .. } => "DivergedLoss",
            Error::CorruptCheckpoint(_) => "CorruptCheckpoint",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::ModalityMismatch(_) => "ModalityMismatch",
            Error::UnknownDepth(_) => "UnknownDepth",
            Error::ClassMismatch(_) => "ClassMismatch",
            Error::InsufficientClassSamples(_) => "InsufficientClassSamples",
            Error::EmptyGallery => "EmptyGallery",
            Error::FractionTooSmall { .. } => "FractionTooSmall",
            Error::BadAspect { .. } => "BadAspect",
            Error::EmptyFeatures => "EmptyFeatures",
            Error::EmptyLexicon => "EmptyLexicon",
            Error::Usage(_) => "Usage",
            Error::Io { .. } => "Io",
            Error::Json(_) => "Json",
        }
    }

    /// Process exit code: 1 usage, 2 data/input, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::InvalidConfig(_) => 1,
            Error::DivergedLoss { .. } => 3,
            Error::BatchItem { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

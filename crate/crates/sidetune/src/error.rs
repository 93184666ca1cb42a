//! Error types shared by every module.
//!
//! Each variant maps to a stable machine-parsable class name (see
//! [`Error::class`]) and to a CLI exit code: 2 for configuration errors,
//! 3 for data/environment errors, 4 for runtime failures.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // -- configuration --
    #[error("alpha coefficient {index} is negative ({value})")]
    NegativeCoefficient { index: usize, value: f64 },
    #[error("alpha coefficients sum to {sum}, expected 1.0 within {tolerance}")]
    ConstraintViolation { sum: f64, tolerance: f64 },
    #[error("alpha configuration is empty")]
    EmptyConfig,
    #[error("fc width {0} is not one of 512, 1024, or absent")]
    InvalidWidth(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("epoch {epoch} outside schedule range 0..={max_epochs}")]
    OutOfRange { epoch: usize, max_epochs: usize },

    // -- shapes and arity --
    #[error("dimension mismatch: expected {expected}, got {actual}{}", fmt_ctx(.context))]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },
    #[error("arity mismatch: {encodings} encodings for {alphas} alpha coefficients")]
    ArityMismatch { encodings: usize, alphas: usize },
    #[error("shape error: {0}")]
    ShapeError(String),

    // -- data --
    #[error("missing root directory: {0}")]
    MissingRoot(PathBuf),
    #[error("corpus at {0} contains no samples")]
    EmptyCorpus(PathBuf),
    #[error("corpus layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("split sizes sum to {expected} but corpus has {actual} samples")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("token {0:?} not present in the embedding table")]
    MissingToken(String),
    #[error("degenerate image: {0}")]
    DegenerateImage(String),

    // -- OCR --
    #[error("OCR engine {0:?} not found; install tesseract-ocr or point --ocr-engine at the binary")]
    EngineMissing(PathBuf),
    #[error("OCR engine exited with {status}: {stderr}")]
    OcrFailure { status: i32, stderr: String },
    #[error("OCR timed out after {0} ms")]
    Timeout(u64),

    // -- training / runtime --
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn fmt_ctx(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl Error {
    /// Stable class name, printed as the machine-parsable error tag by the CLI.
    pub fn class(&self) -> &'static str {
        match self {
            Error::NegativeCoefficient { .. } => "NegativeCoefficient",
            Error::ConstraintViolation { .. } => "ConstraintViolation",
            Error::EmptyConfig => "EmptyConfig",
            Error::InvalidWidth(_) => "InvalidWidth",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::OutOfRange { .. } => "OutOfRange",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ArityMismatch { .. } => "ArityMismatch",
            Error::ShapeError(_) => "ShapeError",
            Error::MissingRoot(_) => "MissingRoot",
            Error::EmptyCorpus(_) => "EmptyCorpus",
            Error::LayoutMismatch(_) => "LayoutMismatch",
            Error::SizeMismatch { .. } => "SizeMismatch",
            Error::MissingToken(_) => "MissingToken",
            Error::DegenerateImage(_) => "DegenerateImage",
            Error::EngineMissing(_) => "EngineMissing",
            Error::OcrFailure { .. } => "OcrFailure",
            Error::Timeout(_) => "Timeout",
            Error::DivergedLoss { .. } => "DivergedLoss",
            Error::EmptyEvalSet => "EmptyEvalSet",
            Error::CheckpointMismatch(_) => "CheckpointMismatch",
            Error::Io { .. } => "Io",
            Error::Parse { .. } => "Parse",
        }
    }

    /// CLI exit code: 2 config, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NegativeCoefficient { .. }
            | Error::ConstraintViolation { .. }
            | Error::EmptyConfig
            | Error::InvalidWidth(_)
            | Error::InvalidConfig(_)
            | Error::OutOfRange { .. } => 2,
            Error::MissingRoot(_)
            | Error::EmptyCorpus(_)
            | Error::LayoutMismatch(_)
            | Error::SizeMismatch { .. }
            | Error::MissingToken(_)
            | Error::DegenerateImage(_)
            | Error::EngineMissing(_)
            | Error::OcrFailure { .. }
            | Error::Timeout(_)
            | Error::Parse { .. } => 3,
            Error::DimensionMismatch { .. }
            | Error::ArityMismatch { .. }
            | Error::ShapeError(_)
            | Error::DivergedLoss { .. }
            | Error::EmptyEvalSet
            | Error::CheckpointMismatch(_)
            | Error::Io { .. } => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

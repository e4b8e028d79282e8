use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid too small for stencil: {rows}x{cols} (need at least 3x3)")]
    GridTooSmall { rows: usize, cols: usize },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("depth must be nonnegative (found {value} at cell {row},{col})")]
    NegativeDepth { row: usize, col: usize, value: f64 },

    #[error("variance must be positive (found {value} at index {index})")]
    NonPositiveVariance { index: usize, value: f64 },

    #[error("missing variance field: {0}")]
    MissingVariance(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("pad inputs: grid {rows}x{cols} is not divisible by 2^{levels}")]
    PadInputs {
        rows: usize,
        cols: usize,
        levels: usize,
    },

    #[error("k_max {modes} too large for a {rows}x{cols} spectral grid")]
    ModesTooLarge {
        modes: usize,
        rows: usize,
        cols: usize,
    },

    #[error("empty scene list: {0}")]
    EmptyScenes(&'static str),

    #[error("zero variance in predictor")]
    ZeroVariancePredictor,

    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("truncated payload in {path}")]
    TruncatedPayload { path: PathBuf },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("config file not found: {0}")]
    MissingConfigFile(PathBuf),

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("line {line}: malformed value `{value}` for `{key}`: {reason}")]
    MalformedValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },

    #[error("line {line}: expected `section.key = value`")]
    MalformedLine { line: usize },

    #[error("missing prerequisite artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("no runs found under {0}")]
    NoRunsFound(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config, CLI usage) rather
    /// than by a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::MissingConfigFile(_)
                | Error::UnknownKey { .. }
                | Error::MalformedValue { .. }
                | Error::MalformedLine { .. }
        )
    }
}

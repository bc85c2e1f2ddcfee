use std::fs::File;
use std::path::{Path, PathBuf};

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),

    #[error("unknown metric group `{0}`")]
    UnknownGroup(String),

    #[error("duplicate metric `{0}` in registry")]
    DuplicateMetric(String),

    #[error("invalid range for `{name}`: lower bound {lower} is not below upper bound {upper}")]
    InvalidRange { name: String, lower: f64, upper: f64 },

    #[error("invalid weight {weight} for `{name}`")]
    InvalidWeight { name: String, weight: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("sample `{sample}`: {metric} = {value} is outside [{lower}, {upper}]")]
    RangeViolation {
        sample: String,
        metric: String,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("duplicate sample id `{0}`")]
    DuplicateSample(String),

    #[error("invalid record `{sample}`: {reason}")]
    InvalidRecord { sample: String, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("tie threshold must be non-negative, got {0}")]
    NegativeDelta(f64),

    #[error("sample `{sample}` has no `{metric}` label")]
    MissingLabel { sample: String, metric: String },

    #[error("sample `{sample}` lacks `{field}`, required for reference-scope pairing")]
    MissingMetadata { sample: String, field: &'static str },

    #[error("pair `{0}` carries no scores and cannot be relabeled")]
    NativePair(String),

    #[error("unknown sample `{0}`")]
    UnknownSample(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("missing feature file {}", .0.display())]
    MissingFeatureFile(PathBuf),

    #[error("bad feature file {}: {reason}", path.display())]
    BadFeatureFile { path: PathBuf, reason: String },

    #[error("sample `{sample}` lasts {duration_s} s, over the {budget_s} s batch budget")]
    OversizedSample {
        sample: String,
        duration_s: f64,
        budget_s: f64,
    },

    #[error("every loss term is skipped")]
    AllTermsSkipped,

    #[error("checkpoint mismatch: {0}")]
    VersionMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    Corruption(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

fn with_path(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Opens `path`, naming it in the error.
pub(crate) fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(with_path(path))
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(with_path(path))
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(with_path(path))
}

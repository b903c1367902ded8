use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rectangle ({x0}, {y0}, {w}x{h}) is outside a {width}x{height} raster")]
    Bounds {
        x0: i64,
        y0: i64,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("category {category} has no pixels in the mask")]
    EmptyObject { category: u8 },

    #[error("instance bank is empty: {0}")]
    EmptyBank(String),

    /// No instance in the bank has a category outside the excluded set.
    #[error("no category outside {excluded:?} exists in the bank")]
    NoDisjointCategory { excluded: Vec<u8> },

    /// Disjoint categories exist but every draw hit an excluded one.
    #[error("resampling exhausted after {attempts} attempts")]
    ResampleExhausted { attempts: usize },

    #[error("instance too small after resampling ({width}x{height})")]
    TooSmall { width: usize, height: usize },

    #[error("instance {iw}x{ih} cannot be placed in a {tw}x{th} target")]
    Placement { iw: usize, ih: usize, tw: usize, th: usize },

    #[error("training diverged at epoch {epoch}")]
    TrainingFailed { epoch: usize },

    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: png: {message}")]
    Png { path: PathBuf, message: String },

    #[error("{path}: json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Wraps a pipeline error with the stage it occurred in.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Bounds { .. } => "bounds",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::EmptyObject { .. } => "empty_object",
            Error::EmptyBank(_) => "empty_bank",
            Error::NoDisjointCategory { .. } => "no_disjoint_category",
            Error::ResampleExhausted { .. } => "resample_exhausted",
            Error::TooSmall { .. } => "too_small",
            Error::Placement { .. } => "placement",
            Error::TrainingFailed { .. } => "training_failed",
            Error::Manifest { .. } => "manifest",
            Error::Io { .. } => "io",
            Error::Png { .. } => "png",
            Error::Json { .. } => "json",
            Error::Context { source, .. } => source.kind(),
        }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn is_exhaustion(&self) -> bool {
        matches!(
            self.root(),
            Error::NoDisjointCategory { .. } | Error::ResampleExhausted { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

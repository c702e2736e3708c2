use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error(
        "clip window out of range for video `{video}`: start {start}, length {length}, skip {skip} \
         needs frame {last} but the video has {frames} frames"
    )]
    ClipRange {
        video: String,
        start: usize,
        length: usize,
        skip: usize,
        last: usize,
        frames: usize,
    },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("contrastive loss needs at least 2 positive pairs, got {0}")]
    InsufficientNegatives(usize),

    #[error("invalid class index {index} for {classes} classes")]
    InvalidClass { index: usize, classes: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training diverged in {stage} at step {step}: {detail}")]
    Divergence {
        stage: String,
        step: usize,
        detail: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {}: run `{producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("stale artifact {}: {detail}; rerun `{producer}`", path.display())]
    StaleArtifact {
        path: PathBuf,
        producer: String,
        detail: String,
    },

    #[error("malformed file {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact { .. } | Error::StaleArtifact { .. } => 3,
            Error::Numeric(_) | Error::Divergence { .. } => 4,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

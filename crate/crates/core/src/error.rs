use std::path::PathBuf;

use thiserror::Error;

/// Error type shared across the toolkit.
///
/// Variants are grouped by the exit-code class the CLI maps them to:
/// usage/config errors, data errors, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: parse error: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("audio file missing for utterance {utt_id}: {path}")]
    MissingAudio { utt_id: String, path: PathBuf },

    #[error(
        "duration mismatch for {utt_id}: manifest says {manifest_s} s, audio has {audio_s} s"
    )]
    DurationMismatch {
        utt_id: String,
        manifest_s: f64,
        audio_s: f64,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("embedding scope violation: {context} requires scope={expected}, got scope={got}")]
    ScopeViolation {
        context: String,
        expected: String,
        got: String,
    },

    #[error("corpus has a single speaker; embedder training needs at least 2")]
    SingleSpeaker,

    #[error("not found: {0}")]
    NotFound(String),

    #[error("audio too short: {samples} samples is less than one {window}-sample window")]
    AudioTooShort { samples: usize, window: usize },

    #[error(
        "CTC target infeasible: {frames} frames cannot emit {target_len} labels ({min_frames} needed)"
    )]
    CtcInfeasible {
        frames: usize,
        target_len: usize,
        min_frames: usize,
    },

    #[error("non-finite loss at {context}")]
    NanLoss { context: String },

    #[error("{0}")]
    Msg(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit-code class used by the CLI: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidSpec(_) | Error::InvalidConfig(_) => 2,
            Error::NanLoss { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

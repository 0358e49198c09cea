use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("window normalizer vanishes at sample {0}; synthesis is singular")]
    SingularSynthesis(usize),

    #[error("invalid weights at frame {frame}: {reason}")]
    InvalidWeights { frame: usize, reason: String },

    #[error("invalid ridge: {0}")]
    InvalidRidge(String),

    #[error("spectrogram column {0} carries no energy")]
    EmptyColumn(usize),

    #[error("SNR undefined: reference signal has zero energy")]
    ZeroSignal,

    #[error("column cannot hold {k} ridges with discard half-width {d} in {admissible} admissible bins")]
    Overcrowded { k: usize, d: usize, admissible: usize },

    #[error("approximate ridge posterior is degenerate")]
    DegeneratePosterior,

    #[error("estimation failed after {} iterations: every posterior approximation was degenerate", .trace.iterations.len())]
    EstimationFailed { trace: crate::inference::SemTrace },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.
//!
//! Everything fallible funnels into [`Error`]; the variants map onto the
//! failure classes the rest of the crate cares about (shape bugs are
//! programmer errors surfaced loudly, config problems are caught at
//! construction time, non-finite numbers abort training with the offending
//! tensor named).

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes fed to an op don't line up.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration caught at construction time.
    #[error("invalid config: {0}")]
    Config(String),

    /// A NaN/inf appeared where finite numbers are required.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    /// Integration produced a non-finite state.
    #[error("sampling diverged at solver step {step}")]
    SamplingDiverged { step: usize },

    /// A dataset/benchmark could not be built under the requested constraints.
    #[error("construction failed: {0}")]
    Construction(String),

    /// Normalization bounds collapsed.
    #[error("degenerate fitness range: min == max == {value}")]
    DegenerateRange { value: f64 },

    /// A symbol outside the vocabulary.
    #[error("unknown symbol {symbol:?} (vocabulary: {vocab})")]
    UnknownSymbol { symbol: char, vocab: String },

    /// Malformed on-disk artifact.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Artifact exists but was produced under a different configuration.
    #[error("stale artifact {path}: {detail}")]
    StaleArtifact { path: PathBuf, detail: String },

    /// Pipeline stage invoked before its inputs exist on disk.
    #[error("missing artifacts: {}", files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingArtifacts { files: Vec<PathBuf> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {detail}")]
    Json { path: PathBuf, detail: String },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}

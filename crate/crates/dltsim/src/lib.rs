//! File formats, presets, reports, parallel search and the command-line
//! driver around [`dltsim_core`].

pub mod cli;
pub mod config;
pub mod io;
pub mod plot;
pub mod pool;
pub mod report;
pub mod timeline;

use std::path::PathBuf;

use dltsim_core::collator::CollateError;
use dltsim_core::format::TraceError;
use dltsim_core::frontend::FrontendError;
use dltsim_core::frontend::ProfileError;
use dltsim_core::pipeline::PipelineError;
use dltsim_core::search::SearchError;
use thiserror::Error;

pub use dltsim_core as core;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Trace { path: PathBuf, source: TraceError },
    #[error("{source} (knob `{knob}`)")]
    Config {
        knob: &'static str,
        source: FrontendError,
    },
    #[error("collate: {0}")]
    Collate(#[from] CollateError),
    #[error("{0}")]
    Pipeline(PipelineError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("profile: {0}")]
    Profile(#[from] ProfileError),
    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 bad input data, 3 internal failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Io { .. } | Error::Parse { .. } | Error::Trace { .. } | Error::Config { .. } => {
                2
            }
            Error::Collate(_) | Error::Search(_) | Error::Profile(_) => 2,
            Error::Pipeline(PipelineError::Simulate(_)) => 3,
            Error::Pipeline(_) => 2,
            Error::Plot(_) => 3,
        }
    }
}

impl From<FrontendError> for Error {
    fn from(source: FrontendError) -> Self {
        let knob = match &source {
            FrontendError::Config(c) => c.knob(),
            FrontendError::Cluster(_) => "cluster",
        };
        Error::Config { knob, source }
    }
}

impl From<PipelineError> for Error {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Frontend(f) => f.into(),
            other => Error::Pipeline(other),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

use crate::backend::BackendError;
use crate::entropic::EntropicError;
use crate::lexical::LexicalError;
use crate::oracle::OracleError;
use crate::probabilistic::PmiError;
use crate::report::ReportError;
use crate::skeleton::SkeletonError;
use crate::trace::TraceError;
use crate::zones::ZoneError;

/// Crate-level error used where several subsystems meet (pipeline, CLI).
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Lexical(#[from] LexicalError),
    #[error(transparent)]
    Entropic(#[from] EntropicError),
    #[error(transparent)]
    Pmi(#[from] PmiError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Zone(#[from] ZoneError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("no record out of {total} was scored without errors")]
    NoSuccess { total: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

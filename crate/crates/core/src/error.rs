use thiserror::Error;

use crate::agent::AgentError;
use crate::gateway::GatewayError;
use crate::gym::GymError;
use crate::ingest::IngestError;
use crate::judge::JudgeError;
use crate::metrics::MetricsError;
use crate::service::ServiceError;
use crate::trace::TraceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-level error, one variant per subsystem.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Gym(#[from] GymError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

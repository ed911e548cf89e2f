use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("graph with {n_agents} agents is not connected")]
    DisconnectedGraph { n_agents: usize },

    #[error("agent index {index} out of range 1..={n_agents}")]
    IndexOutOfRange { index: usize, n_agents: usize },

    #[error("interval ({start}, {end}) is out of range for a trajectory of length {len}")]
    IntervalOutOfRange { start: usize, end: usize, len: usize },

    #[error("segment has no transitions")]
    EmptySegment,

    #[error("non-finite value encountered in {0}")]
    NonFiniteState(&'static str),

    #[error("block system for agent {agent} is singular")]
    SingularBlockSystem { agent: usize },

    #[error("every sampled input sequence produced a non-finite rollout")]
    SolverDegenerate,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by numerics rather than by inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteState(_) | Error::SingularBlockSystem { .. } | Error::SolverDegenerate
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

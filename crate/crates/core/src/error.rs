use std::path::PathBuf;

use thiserror::Error;

use crate::model::Cpu;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("permission denied: {path}: {hint}")]
    PermissionDenied { path: PathBuf, hint: String },

    #[error("register 0x{0:x} is not modeled by the simulation backend")]
    UnmodeledRegister(u32),

    #[error("register 0x{0:x} is read-only")]
    ReadOnlyRegister(u32),

    #[error("value out of range: {0}")]
    RangeViolation(String),

    #[error("unsupported frequency {khz} kHz on cpu {cpu}")]
    UnsupportedFrequency { cpu: Cpu, khz: u64 },

    #[error("frequency governor unavailable on cpu {cpu}: {reason}")]
    GovernorUnavailable { cpu: Cpu, reason: String },

    #[error("performance event {0} unavailable")]
    EventUnavailable(String),

    #[error("power source unavailable: {0}")]
    SourceUnavailable(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid cpu {0}")]
    InvalidCpu(Cpu),

    #[error("empty window [{from}, {to})")]
    EmptyWindow { from: usize, to: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("design matrix is rank deficient ({rank} < {cols})")]
    RankDeficient { rank: usize, cols: usize },

    #[error("too few samples: {have}, need more than {need}")]
    TooFewSamples { have: usize, need: usize },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("C-state {0} unavailable")]
    CstateUnavailable(String),

    #[error("register unavailable: {0}")]
    RegisterUnavailable(String),

    #[error("allocation of {0} bytes failed")]
    AllocationFailure(usize),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("injected fault at {0}")]
    InjectedFault(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Errors caused by the environment or invocation rather than by the
    /// experiment itself. The CLI maps these to exit code 2.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::PermissionDenied { .. }
                | Error::InvalidCpu(_)
                | Error::Config(_)
                | Error::GovernorUnavailable { .. }
                | Error::BackendUnavailable(_)
                | Error::UnsupportedFrequency { .. }
                | Error::RangeViolation(_)
                | Error::CstateUnavailable(_)
        )
    }
}

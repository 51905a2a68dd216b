//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

use crate::request::RequestId;

/// Misuse of a domain operation (calling an RT-only operation on a BE request,
/// advancing a finished request, ...).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("contract violation: {0}")]
pub struct ContractViolation(pub String);

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {needed} samples to fit, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("design matrix is rank deficient (features are collinear)")]
    RankDeficient,
    #[error("invalid profile sample on line {line}: {msg}")]
    BadSample { line: usize, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("allocation plan for request {request} is stale: {reason}")]
    StalePlan { request: RequestId, reason: String },
    #[error("pool exhausted: need {needed} empty blocks, only {available} can be freed")]
    PoolExhausted { needed: u32, available: u32 },
    #[error("request {0} is not known to the block pool")]
    UnknownRequest(RequestId),
    #[error("block pool invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Contract(#[from] ContractViolation),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("simulation stalled at {clock_us} us: {reason}")]
    Stalled { clock_us: u64, reason: String },
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("event log references unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("event log is inconsistent: {0}")]
    Consistency(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

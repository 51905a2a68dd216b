//! Deterministic discrete-event simulator for serving a mix of real-time (RT)
//! and best-effort (BE) LLM requests on one engine instance.

pub mod cost_model;
pub mod error;
pub mod experiment;
pub mod kv;
pub mod metrics;
pub mod queue;
pub mod request;
pub mod scheduler;
pub mod sim;
pub mod workload;

//! Deterministic discrete-event simulator of a single-node LLM text-streaming
//! server.
//!
//! The crate models a buffer-aware preemptive scheduler together with a
//! hierarchical GPU/CPU KV-cache manager, three baseline policies, and the
//! streaming quality metrics used to compare them. Everything runs on a
//! virtual clock, so a `(trace, policy, config)` triple always produces the
//! same event log.
//!
//! Module map:
//!
//! - [`workload`]: burst / Poisson / CSV request traces.
//! - [`engine`]: the event loop, cost model and client-side reading buffers.
//! - [`kvstore`]: write-through sync, chunked writes, preempt/resume plans and
//!   load-evict overlap.
//! - [`scheduler`]: working-set sizing, buffer balancing, recompute-vs-load,
//!   schedulability fallback and the baseline policies.
//! - [`metrics`]: token weights, QoS, effective throughput, TTFT statistics.
//! - [`experiment`]: config parsing, experiment matrices and reports.

// NaN-rejecting range checks read as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod experiment;
pub mod kvstore;
pub mod metrics;
pub mod scheduler;
pub mod workload;

pub use engine::{run, CostModel, SimConfig, SimResult};
pub use error::{Error, Result};
pub use scheduler::{Policy, SchedulerConfig};
pub use workload::{RequestSpec, Trace, WorkloadConfig};

/// Dense request identifier; equals the request's index in its [`Trace`].
pub type RequestId = u32;

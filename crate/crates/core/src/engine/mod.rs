//! Discrete-event simulation core.
//!
//! [`run`] replays a trace under one policy on a virtual clock. Events at the
//! same instant are processed in a fixed kind order, and compute is only
//! dispatched once every event of the current instant has been handled, so a
//! run is a pure function of its inputs.

pub mod buffer;
pub mod cost;
pub mod event;
pub mod record;
mod sim;
pub mod throughput;

use serde::{Deserialize, Serialize};

pub use buffer::ClientBuffer;
pub use cost::{CostModel, Direction};
pub use event::{DecisionRecord, EventKind, EventRecord, TransferInfo};
pub use record::RequestRecord;
pub use throughput::{CapacityEstimate, ThroughputEstimator};

use crate::error::{Error, Result};
use crate::kvstore::DEFAULT_CHUNK_TOKENS;
use crate::scheduler::{Policy, SchedulerConfig};
use crate::workload::Trace;

/// Hierarchical KV-manager switches, used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KvOptions {
    /// Mirror new KV tokens to CPU memory in the background.
    pub write_through: bool,
    /// Let loads proceed while evictions are still draining.
    pub overlap: bool,
    /// Keep preempted KV in CPU memory; otherwise drop it and recompute.
    pub offload: bool,
}

impl Default for KvOptions {
    fn default() -> Self {
        Self {
            write_through: true,
            overlap: true,
            offload: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// GPU KV capacity M in tokens.
    pub gpu_mem_tokens: u64,
    /// Maximum decode batch B.
    pub max_batch: usize,
    pub cost_model: CostModel,
    pub seed: u64,
    /// Chunk size for evictions, loads and write-through transfers.
    pub chunk_tokens: u64,
    /// Virtual seconds of decode history behind the capacity estimate.
    pub throughput_window: f64,
    pub kv: KvOptions,
    /// Check conservation, memory and channel invariants after every instant.
    pub check_invariants: bool,
    /// Keep the full event log in the result.
    pub record_events: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            gpu_mem_tokens: 65_536,
            max_batch: 16,
            cost_model: CostModel::default(),
            seed: 0,
            chunk_tokens: DEFAULT_CHUNK_TOKENS,
            throughput_window: 5.0,
            kv: KvOptions::default(),
            check_invariants: true,
            record_events: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gpu_mem_tokens == 0 {
            return Err(Error::InvalidConfig("sim.gpu_mem_tokens must be > 0".into()));
        }
        if self.max_batch == 0 {
            return Err(Error::InvalidConfig("sim.max_batch must be > 0".into()));
        }
        if self.chunk_tokens == 0 {
            return Err(Error::InvalidConfig("sim.chunk_tokens must be > 0".into()));
        }
        if !(self.throughput_window > 0.0) {
            return Err(Error::InvalidConfig("sim.throughput_window must be > 0".into()));
        }
        self.cost_model.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub events: u64,
    pub ticks: u64,
    pub preemptions: u64,
    pub loads: u64,
    pub recomputes: u64,
    pub tokens_written_through: u64,
    pub tokens_evicted: u64,
    pub tokens_loaded: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub policy: Policy,
    pub records: Vec<RequestRecord>,
    pub event_log: Vec<EventRecord>,
    pub decisions: Vec<DecisionRecord>,
    /// Time of the last event.
    pub total_time: f64,
    /// Time the last token was generated.
    pub processing_time: f64,
    /// Invariant violations found by the monitor; empty on a healthy run.
    pub violations: Vec<String>,
    pub stats: SimStats,
}

impl SimResult {
    /// Event log as JSON lines.
    pub fn event_log_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.event_log {
            out.push_str(&serde_json::to_string(e).expect("event records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Runs `trace` to completion under `policy`.
pub fn run(
    trace: &Trace,
    policy: Policy,
    sched: &SchedulerConfig,
    sim: &SimConfig,
) -> Result<SimResult> {
    trace.validate()?;
    sched.validate()?;
    sim.validate()?;
    for r in &trace.requests {
        let footprint = r.prompt_len as u64 + r.output_len as u64;
        if footprint > sim.gpu_mem_tokens {
            return Err(Error::CapacityInfeasible {
                id: r.id,
                footprint,
                capacity: sim.gpu_mem_tokens,
            });
        }
    }
    sim::Simulator::new(trace, policy, sched, sim).run()
}

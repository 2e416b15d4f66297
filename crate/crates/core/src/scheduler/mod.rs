//! Scheduling policies.
//!
//! The buffer-aware policy works in two steps at every tick. Working-set
//! determination decides how many requests the system should hold (GPU plus
//! CPU) and admits new ones when a running request has buffer to spare.
//! Buffer balancing then picks which members of the working set run on the
//! GPU until the next tick. When the working set demands more tokens per
//! second than the engine can produce, the policy degrades to FCFS.
//!
//! Everything here is a pure function over snapshots; the engine owns state.

mod prefill;
mod select;
mod tick;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::QosConfig;
use crate::RequestId;

pub use prefill::{partition_prefill, PrefillCandidate, PrefillTracker};
pub use select::{
    greedy_order, selection_gain, selection_value, select_batch, select_batch_greedy, Selection,
};
pub use tick::{plan_tick, CandidateState, TickCandidate, TickContext, TickPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Buffer-aware preemptive scheduling with hierarchical KV offload.
    Tokenflow,
    /// Conservative first-come-first-served with full reservation.
    Fcfs,
    /// FCFS with chunked prefill interleaved with decode.
    Chunked,
    /// Drain-time priority with recompute-based preemption.
    Qoe,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Tokenflow, Policy::Fcfs, Policy::Chunked, Policy::Qoe];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Tokenflow => "tokenflow",
            Policy::Fcfs => "fcfs",
            Policy::Chunked => "chunked",
            Policy::Qoe => "qoe",
        }
    }

    /// Runs periodic scheduling ticks.
    pub fn uses_ticks(self) -> bool {
        matches!(self, Policy::Tokenflow | Policy::Qoe)
    }

    /// Reserves prompt + output memory at admission.
    pub fn reserves_output(self) -> bool {
        matches!(self, Policy::Fcfs | Policy::Chunked)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown policy {s:?} (expected tokenflow, fcfs, chunked or qoe)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    BufferAware,
    FcfsFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Seconds between scheduling ticks.
    pub schedule_interval: f64,
    /// Estimated per-request KV footprint in tokens, used to size the
    /// working set.
    pub per_request_mem_estimate: u64,
    /// How fast the working set shrinks towards the running count.
    pub workingset_adjust_rate: f64,
    /// Safety multiplier on the buffer a running request must hold before it
    /// may be preempted in favour of a new one.
    pub buffer_safety_factor: f64,
    /// Weight of the low-buffer penalty in the selection objective.
    pub penalty_weight: f64,
    /// Rescheduling latency a preempted request must ride out on its buffer
    /// before it can be brought back. Fixed rather than tied to the interval.
    pub tau_schedule: f64,
    /// A running request whose buffer drains within this many seconds forces
    /// a tick.
    pub critical_buffer_seconds: f64,
    /// Tokens per prefill chunk for the chunked baseline.
    pub prefill_chunk_tokens: u32,
    /// Requests waiting longer than this for a first token bypass batched
    /// prefill.
    pub ttft_bypass_seconds: f64,
    /// Smoothing factor for the per-request allocated-time average.
    pub t_prime_smoothing: f64,
    /// Prefill batches kept in the per-token prefill latency window.
    pub prefill_window: usize,
    /// Token-value settings shared with the QoS metric.
    pub value: QosConfig,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            schedule_interval: 1.0,
            per_request_mem_estimate: 1024,
            workingset_adjust_rate: 0.5,
            buffer_safety_factor: 2.0,
            penalty_weight: 1.0,
            tau_schedule: 1.0,
            critical_buffer_seconds: 1.0,
            prefill_chunk_tokens: 256,
            ttft_bypass_seconds: 1.3,
            t_prime_smoothing: 0.3,
            prefill_window: 16,
            value: QosConfig::default(),
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("scheduler.{m}")));
        if !(self.schedule_interval > 0.0 && self.schedule_interval.is_finite()) {
            return bad("schedule_interval must be > 0");
        }
        if self.per_request_mem_estimate == 0 {
            return bad("per_request_mem_estimate must be > 0");
        }
        if !(0.0..=1.0).contains(&self.workingset_adjust_rate) {
            return bad("workingset_adjust_rate must lie in [0, 1]");
        }
        if !(self.buffer_safety_factor >= 1.0) {
            return bad("buffer_safety_factor must be >= 1");
        }
        if !(self.penalty_weight >= 0.0) {
            return bad("penalty_weight must be >= 0");
        }
        if !(self.tau_schedule >= 0.0) {
            return bad("tau_schedule must be >= 0");
        }
        if !(self.critical_buffer_seconds >= 0.0) {
            return bad("critical_buffer_seconds must be >= 0");
        }
        if self.prefill_chunk_tokens == 0 {
            return bad("prefill_chunk_tokens must be > 0");
        }
        if !(self.t_prime_smoothing > 0.0 && self.t_prime_smoothing <= 1.0) {
            return bad("t_prime_smoothing must lie in (0, 1]");
        }
        if self.prefill_window == 0 {
            return bad("prefill_window must be > 0");
        }
        self.value.validate()
    }
}

/// Scheduler-side view of one candidate at a tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestPriorityView {
    pub request_id: RequestId,
    pub arrival_time: f64,
    /// Unread tokens in the client buffer.
    pub b_rem: f64,
    /// Buffer expected after one interval including switch overhead.
    pub b_pred: f64,
    pub r: f64,
    /// Value of the next generated token.
    pub v: f64,
    /// Moving average of execution time received per tick.
    pub t_prime: f64,
    /// Time lost to switching in before useful work.
    pub t_overhead: f64,
    /// Low-buffer penalty.
    pub phi: f64,
    pub utility: f64,
}

impl RequestPriorityView {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        request_id: RequestId,
        arrival_time: f64,
        b_rem: f64,
        r: f64,
        v: f64,
        t_prime: f64,
        t_overhead: f64,
        expected_tokens: f64,
        cfg: &SchedulerConfig,
    ) -> Self {
        let phi = buffer_penalty(b_rem, r, cfg.schedule_interval);
        let t_eff = (t_prime - t_overhead).max(0.0);
        let b_pred =
            (b_rem + expected_tokens - r * (cfg.schedule_interval + t_overhead)).max(0.0);
        Self {
            request_id,
            arrival_time,
            b_rem,
            b_pred,
            r,
            v,
            t_prime,
            t_overhead,
            phi,
            utility: v * t_eff - cfg.penalty_weight * phi,
        }
    }

    pub fn t_eff(&self) -> f64 {
        (self.t_prime - self.t_overhead).max(0.0)
    }

    /// Seconds until the buffer runs dry.
    pub fn drain_time(&self) -> f64 {
        self.b_rem / self.r
    }
}

/// Penalty for a low buffer, with the buffer measured in intervals of
/// consumption.
pub fn buffer_penalty(b_rem: f64, rate: f64, interval: f64) -> f64 {
    (-b_rem / (rate * interval)).exp()
}

/// Round half up; inputs here are non-negative.
fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

pub fn working_set_static(mem_tokens: u64, per_request_mem: u64) -> usize {
    (mem_tokens / per_request_mem) as usize
}

/// Target working-set size for the coming interval.
pub fn working_set_size(mem_tokens: u64, n_running: usize, cfg: &SchedulerConfig) -> usize {
    let w_static = working_set_static(mem_tokens, cfg.per_request_mem_estimate).max(1);
    if n_running >= w_static {
        return w_static;
    }
    let gap = (w_static - n_running) as f64;
    let w = round_half_up(w_static as f64 - cfg.workingset_adjust_rate * gap) as usize;
    w.clamp(1, w_static)
}

/// Active request summary used to decide whether a tick is due.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveBuffer {
    pub b_rem: f64,
    pub rate: f64,
}

pub fn should_tick(
    now: f64,
    last_tick: Option<f64>,
    waiting_count: usize,
    active: &[ActiveBuffer],
    cfg: &SchedulerConfig,
) -> bool {
    let elapsed = match last_tick {
        Some(t) => now - t >= cfg.schedule_interval - 1e-12,
        None => true,
    };
    elapsed && (waiting_count > 0 || any_critical(active, cfg))
}

pub fn any_critical(active: &[ActiveBuffer], cfg: &SchedulerConfig) -> bool {
    active
        .iter()
        .any(|a| a.b_rem / a.rate < cfg.critical_buffer_seconds)
}

/// Preemption gate: a running request may yield its slot to a new request
/// only if its buffer covers the switch-out, switch-in and rescheduling delay
/// with a safety margin.
pub fn admit(b_rem: f64, rate: f64, tau_evict: f64, tau_load: f64, cfg: &SchedulerConfig) -> bool {
    b_rem >= cfg.buffer_safety_factor * rate * (tau_evict + tau_load + cfg.tau_schedule)
}

pub fn check_schedulability(rates: impl IntoIterator<Item = f64>, gamma: f64) -> SchedulerMode {
    let sum: f64 = rates.into_iter().sum();
    if sum > gamma {
        SchedulerMode::FcfsFallback
    } else {
        SchedulerMode::BufferAware
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResumeMethod {
    Load,
    Recompute,
}

pub fn recompute_or_load(t_io: f64, t_recompute: f64) -> ResumeMethod {
    if t_io > t_recompute {
        ResumeMethod::Recompute
    } else {
        ResumeMethod::Load
    }
}

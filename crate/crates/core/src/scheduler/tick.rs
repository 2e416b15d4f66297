use serde::{Deserialize, Serialize};

use super::{
    admit, check_schedulability, recompute_or_load, select_batch, working_set_size, Policy,
    RequestPriorityView, ResumeMethod, SchedulerConfig, SchedulerMode,
};
use crate::metrics::token_weight_f;
use crate::RequestId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateState {
    /// Arrived, not yet admitted to the working set.
    Waiting,
    /// Admitted; prefill or recompute pending.
    Admitted,
    /// GPU-resident and decoding.
    Running,
    /// Preempted with its KV in CPU memory, or dropped for recompute.
    Paused,
    /// Preempted; residual eviction still in flight.
    Evicting,
    /// Resuming; load chunks in flight.
    Loading,
}

/// Engine snapshot of one live request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickCandidate {
    pub id: RequestId,
    pub arrival_time: f64,
    pub rate: f64,
    pub prompt_len: u32,
    pub output_len: u32,
    pub generated: u32,
    pub b_rem: f64,
    pub total_kv: u64,
    /// Tokens of growth to budget until the next tick.
    pub headroom: u64,
    pub state: CandidateState,
    pub t_prime: f64,
    /// Estimated time to write out whatever is not yet mirrored in CPU memory.
    pub tau_evict: f64,
    /// Estimated time to load the full context back.
    pub tau_load: f64,
    /// Paused requests only: the KV survives in CPU memory.
    pub resumable: bool,
}

impl TickCandidate {
    fn footprint(&self) -> u64 {
        let base = if self.state == CandidateState::Admitted && self.generated == 0 {
            self.prompt_len as u64
        } else {
            self.total_kv
        };
        base + self.headroom
    }

    fn drain_time(&self) -> f64 {
        self.b_rem / self.rate
    }

    /// KV tokens held once the request has generated its whole output.
    fn final_footprint(&self) -> u64 {
        self.prompt_len as u64 + self.output_len as u64
    }
}

/// Tick-wide inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickContext {
    pub now: f64,
    pub policy: Policy,
    pub gamma: f64,
    pub mem_tokens: u64,
    pub max_batch: usize,
    /// Sliding-window prefill seconds per token.
    pub prefill_per_token: f64,
    /// Hierarchical offload available; otherwise every resume recomputes.
    pub offload: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TickPlan {
    pub mode: Option<SchedulerMode>,
    pub rate_sum: f64,
    pub admitted: Vec<RequestId>,
    pub deferred: Vec<RequestId>,
    pub preempted: Vec<RequestId>,
    pub resumed: Vec<RequestId>,
    pub recomputed: Vec<RequestId>,
    /// Requests meant to hold a GPU slot after the tick.
    pub selected: Vec<RequestId>,
}

pub fn plan_tick(cands: &[TickCandidate], ctx: &TickContext, cfg: &SchedulerConfig) -> TickPlan {
    match ctx.policy {
        Policy::Qoe => plan_qoe(cands, ctx, cfg),
        _ => plan_tokenflow(cands, ctx, cfg),
    }
}

fn by_arrival(a: &TickCandidate, b: &TickCandidate) -> std::cmp::Ordering {
    a.arrival_time
        .total_cmp(&b.arrival_time)
        .then(a.id.cmp(&b.id))
}

fn view(c: &TickCandidate, ctx: &TickContext, cfg: &SchedulerConfig) -> RequestPriorityView {
    let t_overhead = match c.state {
        CandidateState::Running | CandidateState::Loading => 0.0,
        CandidateState::Admitted if c.generated == 0 => ctx.prefill_per_token * c.prompt_len as f64,
        _ => {
            let t_rec = ctx.prefill_per_token * c.total_kv as f64;
            if ctx.offload && c.resumable {
                c.tau_load.min(t_rec)
            } else {
                t_rec
            }
        }
    };
    let v = token_weight_f(c.b_rem, c.output_len, &cfg.value);
    let speed = ctx.gamma / ctx.max_batch.max(1) as f64;
    let expected = (c.t_prime - t_overhead).max(0.0) * speed;
    RequestPriorityView::new(
        c.id,
        c.arrival_time,
        c.b_rem,
        c.rate,
        v,
        c.t_prime,
        t_overhead,
        expected,
        cfg,
    )
}

/// Splits a selection into preemptions and resumptions relative to the
/// current states.
fn diff(
    plan: &mut TickPlan,
    cands: &[TickCandidate],
    selected: &[RequestId],
    ctx: &TickContext,
) {
    let is_selected = |id: RequestId| selected.contains(&id);
    for c in cands {
        match c.state {
            CandidateState::Running if !is_selected(c.id) => plan.preempted.push(c.id),
            CandidateState::Paused if is_selected(c.id) => {
                let t_rec = ctx.prefill_per_token * c.total_kv as f64;
                let method = if ctx.offload && c.resumable {
                    recompute_or_load(c.tau_load, t_rec)
                } else {
                    ResumeMethod::Recompute
                };
                match method {
                    ResumeMethod::Load => plan.resumed.push(c.id),
                    ResumeMethod::Recompute => plan.recomputed.push(c.id),
                }
            }
            _ => {}
        }
    }
    plan.selected = selected.to_vec();
}

fn plan_tokenflow(cands: &[TickCandidate], ctx: &TickContext, cfg: &SchedulerConfig) -> TickPlan {
    use CandidateState::*;
    let mut plan = TickPlan::default();
    let in_ws = |c: &&TickCandidate| c.state != Waiting;
    let working: Vec<&TickCandidate> = cands.iter().filter(in_ws).collect();
    plan.rate_sum = working.iter().fold(0.0, |s, c| s + c.rate);
    let mode = check_schedulability(working.iter().map(|c| c.rate), ctx.gamma);
    plan.mode = Some(mode);

    let mut waiting: Vec<&TickCandidate> = cands.iter().filter(|c| c.state == Waiting).collect();
    waiting.sort_by(|a, b| by_arrival(a, b));

    // GPU slots and memory already committed to in-flight loads
    let loading: Vec<&TickCandidate> = working.iter().copied().filter(|c| c.state == Loading).collect();
    let mut slots = ctx.max_batch.saturating_sub(loading.len());
    let mut mem = ctx.mem_tokens.saturating_sub(loading.iter().map(|c| c.footprint()).sum());

    let mut admitted_now: Vec<&TickCandidate> = Vec::new();
    if mode == SchedulerMode::BufferAware {
        let n_running = working
            .iter()
            .filter(|c| matches!(c.state, Running | Loading))
            .count();
        let target = working_set_size(ctx.mem_tokens, n_running, cfg);
        // a request joins for free only if the whole working set can still
        // run to completion side by side; otherwise it displaces a running
        // request whose buffer passes the admission gate
        let mut free_slots = ctx.max_batch.saturating_sub(working.len());
        let mut free_mem = ctx
            .mem_tokens
            .saturating_sub(working.iter().map(|c| c.final_footprint()).sum());
        let mut yielders: Vec<&TickCandidate> = working
            .iter()
            .copied()
            .filter(|c| c.state == Running && admit(c.b_rem, c.rate, c.tau_evict, c.tau_load, cfg))
            .collect();
        // largest drain time yields first
        yielders.sort_by(|a, b| b.drain_time().total_cmp(&a.drain_time()).then(a.id.cmp(&b.id)));
        let mut yielders = yielders.into_iter();
        let mut rate_sum = plan.rate_sum;
        for w in &waiting {
            let ws_size = working.len() + admitted_now.len();
            if ws_size >= target {
                break;
            }
            if ws_size > 0 && rate_sum + w.rate > ctx.gamma {
                break;
            }
            if free_slots > 0 && w.final_footprint() <= free_mem {
                free_slots -= 1;
                free_mem -= w.final_footprint();
            } else if yielders.next().is_none() {
                break;
            }
            admitted_now.push(w);
            rate_sum += w.rate;
        }
    }
    plan.admitted = admitted_now.iter().map(|c| c.id).collect();
    plan.deferred = waiting
        .iter()
        .filter(|w| !plan.admitted.contains(&w.id))
        .map(|w| w.id)
        .collect();

    let selected = match mode {
        SchedulerMode::BufferAware => {
            // admitted requests keep their place; the rest is balanced
            let mut pinned: Vec<&TickCandidate> = working
                .iter()
                .copied()
                .filter(|c| c.state == Admitted)
                .chain(admitted_now.iter().copied())
                .collect();
            pinned.sort_by(|a, b| by_arrival(a, b));
            let mut selected = Vec::new();
            for p in pinned {
                if slots > 0 && p.footprint() <= mem {
                    slots -= 1;
                    mem -= p.footprint();
                    selected.push(p.id);
                }
            }
            let pool: Vec<&TickCandidate> = working
                .iter()
                .copied()
                .filter(|c| matches!(c.state, Running | Paused))
                .collect();
            let views: Vec<RequestPriorityView> = pool.iter().map(|c| view(c, ctx, cfg)).collect();
            let lengths: Vec<u64> = pool.iter().map(|c| c.footprint()).collect();
            let s = select_batch(&views, &lengths, mem, slots, cfg.penalty_weight);
            selected.extend(s.selected);
            selected
        }
        SchedulerMode::FcfsFallback => {
            let mut pool: Vec<&TickCandidate> = working
                .iter()
                .copied()
                .filter(|c| matches!(c.state, Running | Paused | Admitted))
                .collect();
            pool.sort_by(|a, b| by_arrival(a, b));
            let mut selected = Vec::new();
            for c in pool {
                if slots > 0 && c.footprint() <= mem {
                    slots -= 1;
                    mem -= c.footprint();
                    selected.push(c.id);
                }
            }
            selected
        }
    };
    diff(&mut plan, cands, &selected, ctx);
    plan
}

/// Drain-time priority: requests that have never produced a token first,
/// then the emptiest buffers. A running request close to stalling keeps its
/// slot. Preemption drops the KV.
fn plan_qoe(cands: &[TickCandidate], ctx: &TickContext, cfg: &SchedulerConfig) -> TickPlan {
    use CandidateState::*;
    let mut plan = TickPlan {
        mode: None,
        rate_sum: cands.iter().filter(|c| c.state != Waiting).fold(0.0, |s, c| s + c.rate),
        ..TickPlan::default()
    };
    let mut pool: Vec<&TickCandidate> = cands
        .iter()
        .filter(|c| matches!(c.state, Waiting | Admitted | Running | Paused))
        .collect();
    pool.sort_by(|a, b| {
        let never = |c: &TickCandidate| c.generated == 0;
        never(b)
            .cmp(&never(a))
            .then(a.drain_time().total_cmp(&b.drain_time()))
            .then(by_arrival(a, b))
    });
    let (pinned, rest): (Vec<&TickCandidate>, Vec<&TickCandidate>) = pool
        .into_iter()
        .partition(|c| c.state == Running && c.drain_time() < cfg.critical_buffer_seconds);
    let mut slots = ctx.max_batch;
    let mut mem = ctx.mem_tokens;
    let mut selected = Vec::new();
    for c in pinned.into_iter().chain(rest) {
        if slots > 0 && c.footprint() <= mem {
            slots -= 1;
            mem -= c.footprint();
            selected.push(c.id);
        }
    }
    let mut waiting: Vec<&TickCandidate> = cands.iter().filter(|c| c.state == Waiting).collect();
    waiting.sort_by(|a, b| by_arrival(a, b));
    for w in waiting {
        if selected.contains(&w.id) {
            plan.admitted.push(w.id);
        } else {
            plan.deferred.push(w.id);
        }
    }
    for c in cands {
        match c.state {
            Running if !selected.contains(&c.id) => plan.preempted.push(c.id),
            Paused if selected.contains(&c.id) => plan.recomputed.push(c.id),
            _ => {}
        }
    }
    plan.selected = selected;
    plan
}

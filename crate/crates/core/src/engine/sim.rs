use super::buffer::{ClientBuffer, ConsumeOutcome};
use super::cost::{CostModel, Direction};
use super::event::{DecisionRecord, EventKind, EventQueue, EventRecord, SimEvent, TransferInfo};
use super::record::RequestRecord;
use super::throughput::ThroughputEstimator;
use super::{SimConfig, SimResult, SimStats};
use crate::error::{Error, Result};
use crate::kvstore::{
    self, chunked, plan_write_chunk, Chunk, ChunkKind, KvResidency, PendingWrite,
    TransferChannel, TransferQueueState,
};
use crate::scheduler::{
    any_critical, partition_prefill, plan_tick, should_tick, ActiveBuffer, CandidateState,
    Policy, PrefillCandidate, PrefillTracker, SchedulerConfig, SchedulerMode, TickCandidate,
    TickContext, TickPlan,
};
use crate::workload::{RequestSpec, Trace};
use crate::RequestId;

/// Consecutive ticks with nothing else happening before the run is declared
/// stuck.
const IDLE_TICK_LIMIT: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    NotArrived,
    Waiting,
    Admitted,
    Prefilling,
    Running,
    Evicting,
    Paused,
    Loading,
    Finished,
}

#[derive(Debug)]
struct Req {
    spec: RequestSpec,
    phase: Phase,
    buf: ClientBuffer,
    rec: RequestRecord,
    kv: KvResidency,
    /// Memory held regardless of residency (conservative admission).
    reserved: u64,
    /// Prompt tokens prefilled so far by the chunked baseline.
    chunk_progress: u64,
    /// KV is gone; the next prefill rebuilds prompt plus generated tokens.
    recompute: bool,
    admit_seq: u64,
    t_prime: f64,
    run_since_tick: f64,
    loads_pending: u32,
    read_done: bool,
}

impl Req {
    fn charge(&self) -> u64 {
        self.kv.gpu_resident.max(self.reserved)
    }

    fn prefill_tokens(&self) -> u64 {
        self.spec.prompt_len as u64 + self.buf.generated as u64
    }

    fn occupancy(&self) -> u32 {
        self.buf.occupancy()
    }

    fn drain_time(&self) -> f64 {
        self.occupancy() as f64 / self.spec.consume_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ComputeKind {
    Prefill,
    PrefillChunk,
    Decode,
}

#[derive(Debug)]
struct Compute {
    kind: ComputeKind,
    batch: u64,
    ids: Vec<RequestId>,
    duration: f64,
    tokens: u64,
}

pub(super) struct Simulator<'a> {
    policy: Policy,
    sched: &'a SchedulerConfig,
    cfg: &'a SimConfig,
    cm: CostModel,
    now: f64,
    queue: EventQueue,
    reqs: Vec<Req>,
    d2h: TransferChannel,
    h2d: TransferChannel,
    next_chunk: u64,
    compute: Option<Compute>,
    next_batch: u64,
    estimator: ThroughputEstimator,
    prefill_tracker: PrefillTracker,
    last_tick: Option<f64>,
    tick_pending: bool,
    pending_plan: Option<TickPlan>,
    pending_tick_cost: f64,
    events_since_tick: u64,
    idle_ticks: u32,
    admit_seq: u64,
    last_step_decode: bool,
    finished: usize,
    processing_time: f64,
    seq: u64,
    log: Vec<EventRecord>,
    decisions: Vec<DecisionRecord>,
    violations: Vec<String>,
    stats: SimStats,
    synced_seen: Vec<u64>,
    last_started: [Option<(u64, f64)>; 2],
}

impl<'a> Simulator<'a> {
    pub(super) fn new(trace: &Trace, policy: Policy, sched: &'a SchedulerConfig, cfg: &'a SimConfig) -> Self {
        let cm = cfg.cost_model;
        let reqs: Vec<Req> = trace
            .requests
            .iter()
            .map(|s| Req {
                spec: s.clone(),
                phase: Phase::NotArrived,
                buf: ClientBuffer::new(s.output_len, s.consume_rate),
                rec: RequestRecord::new(s),
                kv: KvResidency::new(s.id),
                reserved: 0,
                chunk_progress: 0,
                recompute: false,
                admit_seq: 0,
                t_prime: sched.schedule_interval,
                run_since_tick: 0.0,
                loads_pending: 0,
                read_done: false,
            })
            .collect();
        let mut queue = EventQueue::default();
        for r in &trace.requests {
            queue.push(r.arrival_time, EventKind::Arrival, r.id as u64);
        }
        Self {
            policy,
            sched,
            cfg,
            cm,
            now: 0.0,
            queue,
            synced_seen: vec![0; reqs.len()],
            reqs,
            d2h: TransferChannel::new(Direction::D2h, &cm),
            h2d: TransferChannel::new(Direction::H2d, &cm),
            next_chunk: 0,
            compute: None,
            next_batch: 0,
            estimator: ThroughputEstimator::new(cfg.throughput_window, cm.nominal_throughput(cfg.max_batch)),
            prefill_tracker: PrefillTracker::new(sched.prefill_window, cm.prefill_per_token),
            last_tick: None,
            tick_pending: false,
            pending_plan: None,
            pending_tick_cost: 0.0,
            events_since_tick: 0,
            idle_ticks: 0,
            admit_seq: 0,
            last_step_decode: false,
            finished: 0,
            processing_time: 0.0,
            seq: 0,
            log: Vec::new(),
            decisions: Vec::new(),
            violations: Vec::new(),
            stats: SimStats::default(),
            last_started: [None, None],
        }
    }

    pub(super) fn run(mut self) -> Result<SimResult> {
        while let Some(ev) = self.queue.pop() {
            if ev.time < self.now {
                self.violate("clock", format!("event at {} after {}", ev.time, self.now));
            }
            self.now = ev.time;
            self.handle(ev)?;
            if self.queue.peek_time().is_none_or(|t| t > self.now) {
                self.end_of_instant();
            }
        }
        let remaining = self.reqs.len() - self.finished;
        if remaining > 0 {
            return Err(Error::Deadlock {
                time: self.now,
                remaining,
            });
        }
        if self.cfg.check_invariants {
            self.check_final();
        }
        Ok(SimResult {
            policy: self.policy,
            records: self.reqs.into_iter().map(|r| r.rec).collect(),
            event_log: self.log,
            decisions: self.decisions,
            total_time: self.now,
            processing_time: self.processing_time,
            violations: self.violations,
            stats: self.stats,
        })
    }

    fn violate(&mut self, what: &str, msg: String) {
        self.violations.push(format!("t={:.6} {what}: {msg}", self.now));
    }

    fn log_event(&mut self, ev: SimEvent, transfer: Option<TransferInfo>, decision: Option<DecisionRecord>, requests: Vec<RequestId>) {
        self.seq += 1;
        if self.cfg.record_events {
            self.log.push(EventRecord {
                seq: self.seq,
                time: ev.time,
                kind: ev.kind,
                subject: ev.subject,
                transfer,
                decision,
                requests,
            });
        }
    }

    fn handle(&mut self, ev: SimEvent) -> Result<()> {
        self.stats.events += 1;
        if ev.kind != EventKind::ScheduleTick {
            self.events_since_tick += 1;
        }
        match ev.kind {
            EventKind::Arrival => {
                self.reqs[ev.subject as usize].phase = Phase::Waiting;
                self.log_event(ev, None, None, Vec::new());
            }
            EventKind::ScheduleTick => self.on_tick(ev)?,
            EventKind::PrefillDone | EventKind::DecodeIterDone => self.on_compute_done(ev),
            EventKind::ChunkTransferDone => self.on_transfer_done(ev),
            EventKind::Consume => {
                self.on_consume(ev.subject as RequestId);
                self.log_event(ev, None, None, Vec::new());
            }
            EventKind::RequestDone => {
                self.finished += 1;
                self.log_event(ev, None, None, Vec::new());
            }
        }
        Ok(())
    }

    // ---- clients ----

    fn on_consume(&mut self, id: RequestId) {
        let now = self.now;
        let r = &mut self.reqs[id as usize];
        if r.read_done {
            return;
        }
        if let ConsumeOutcome::Consumed { next } = r.buf.consume(now) {
            r.rec.consume_times.push(now);
            r.rec.rebuffer = r.buf.rebuffer_accrued;
            match next {
                Some(t) => self.queue.push(t, EventKind::Consume, id as u64),
                None => {
                    r.read_done = true;
                    r.rec.completion_time = Some(now);
                    self.queue.push(now, EventKind::RequestDone, id as u64);
                }
            }
        }
    }

    fn append_token(&mut self, id: RequestId) {
        let now = self.now;
        let r = &mut self.reqs[id as usize];
        let a = r.buf.append_token(now);
        r.rec.gen_times.push(now);
        r.rec.buffer_at_gen.push(a.buffer_after);
        if r.rec.first_token_time.is_none() {
            r.rec.first_token_time = Some(now);
        }
        r.kv.total_kv += 1;
        r.kv.gpu_resident += 1;
        if a.wake_reader {
            self.queue.push(now, EventKind::Consume, id as u64);
        }
        if r.buf.generation_complete() {
            self.finish_generation(id);
        }
    }

    fn finish_generation(&mut self, id: RequestId) {
        let r = &mut self.reqs[id as usize];
        r.phase = Phase::Finished;
        r.rec.generation_done = Some(self.now);
        r.kv.gpu_resident = 0;
        r.reserved = 0;
        self.processing_time = self.processing_time.max(self.now);
        self.d2h.cancel_where(|c| c.owner == id);
        self.h2d.cancel_where(|c| c.owner == id);
        if self.cfg.check_invariants {
            let r = &self.reqs[id as usize];
            let expect = r.spec.prompt_len as u64 + r.spec.output_len as u64;
            if r.kv.total_kv != expect {
                let msg = format!("request {id} finished with {} KV tokens, expected {expect}", r.kv.total_kv);
                self.violate("token_loss", msg);
            }
        }
    }

    // ---- compute ----

    fn on_compute_done(&mut self, ev: SimEvent) {
        let Some(c) = self.compute.take() else {
            self.violate("compute", "completion without a running step".into());
            return;
        };
        debug_assert_eq!(c.batch, ev.subject);
        match c.kind {
            ComputeKind::Decode => {
                self.estimator.record(self.now, c.ids.len() as u64, c.duration);
                for &id in &c.ids {
                    self.reqs[id as usize].run_since_tick += c.duration;
                    self.append_token(id);
                }
            }
            ComputeKind::Prefill => {
                self.prefill_tracker.record(c.tokens, c.duration);
                for &id in &c.ids {
                    let r = &mut self.reqs[id as usize];
                    if r.recompute {
                        r.recompute = false;
                        r.rec.recomputes += 1;
                        self.stats.recomputes += 1;
                    }
                    r.phase = Phase::Running;
                    self.append_token(id);
                }
            }
            ComputeKind::PrefillChunk => {
                self.prefill_tracker.record(c.tokens, c.duration);
                let id = c.ids[0];
                let r = &mut self.reqs[id as usize];
                r.chunk_progress += c.tokens;
                if r.chunk_progress >= r.prefill_tokens() {
                    r.chunk_progress = 0;
                    if r.recompute {
                        r.recompute = false;
                        r.rec.recomputes += 1;
                        self.stats.recomputes += 1;
                    }
                    r.phase = Phase::Running;
                    self.append_token(id);
                } else {
                    r.phase = Phase::Admitted;
                }
            }
        }
        self.log_event(ev, None, None, c.ids);
    }

    fn used_mem(&self) -> u64 {
        self.reqs.iter().map(Req::charge).sum()
    }

    /// Memory not yet charged, less the tokens the in-flight step will append.
    fn free_mem(&self) -> u64 {
        let growth: u64 = self.compute.as_ref().map_or(0, |c| {
            c.ids
                .iter()
                .map(|&id| {
                    let r = &self.reqs[id as usize];
                    u64::from(r.kv.gpu_resident + 1 > r.reserved)
                })
                .sum()
        });
        self.cfg.gpu_mem_tokens.saturating_sub(self.used_mem() + growth)
    }

    fn active_slots(&self) -> usize {
        self.reqs
            .iter()
            .filter(|r| matches!(r.phase, Phase::Running | Phase::Loading | Phase::Prefilling))
            .count()
    }

    fn by_arrival(&self, mut ids: Vec<RequestId>) -> Vec<RequestId> {
        ids.sort_by(|&a, &b| {
            let (x, y) = (&self.reqs[a as usize].spec, &self.reqs[b as usize].spec);
            x.arrival_time.total_cmp(&y.arrival_time).then(a.cmp(&b))
        });
        ids
    }

    fn ids_in(&self, phase: Phase) -> Vec<RequestId> {
        let ids = self
            .reqs
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| r.spec.id)
            .collect();
        self.by_arrival(ids)
    }

    fn take_tick_cost(&mut self) -> f64 {
        std::mem::take(&mut self.pending_tick_cost)
    }

    fn start_compute(&mut self, kind: ComputeKind, ids: Vec<RequestId>, duration: f64, tokens: u64) {
        self.next_batch += 1;
        let event = match kind {
            ComputeKind::Decode => EventKind::DecodeIterDone,
            _ => EventKind::PrefillDone,
        };
        self.queue.push(self.now + duration, event, self.next_batch);
        self.compute = Some(Compute {
            kind,
            batch: self.next_batch,
            ids,
            duration,
            tokens,
        });
    }

    fn dispatch(&mut self) {
        if self.compute.is_some() {
            return;
        }
        if let Some(plan) = self.pending_plan.take() {
            self.apply_plan(plan);
        }
        if self.policy.reserves_output() {
            self.admit_reserved();
        }
        let started = if self.policy == Policy::Chunked {
            let decodable = self.reqs.iter().any(|r| r.phase == Phase::Running);
            (!decodable || self.last_step_decode) && self.try_prefill_chunk()
        } else {
            self.try_prefill()
        };
        if !started {
            self.try_decode();
        }
    }

    /// Conservative admission: arrival order, prompt + output reserved up
    /// front.
    fn admit_reserved(&mut self) {
        for id in self.ids_in(Phase::Waiting) {
            let occupied = self
                .reqs
                .iter()
                .filter(|r| matches!(r.phase, Phase::Running | Phase::Prefilling | Phase::Admitted))
                .count();
            let r = &self.reqs[id as usize];
            let need = r.spec.prompt_len as u64 + r.spec.output_len as u64;
            if occupied >= self.cfg.max_batch || need > self.free_mem() {
                break;
            }
            self.admit_seq += 1;
            let seq = self.admit_seq;
            let r = &mut self.reqs[id as usize];
            r.reserved = need;
            r.phase = Phase::Admitted;
            r.admit_seq = seq;
        }
    }

    fn prefill_critical(&self, r: &Req) -> bool {
        if r.buf.generated == 0 {
            self.now - r.spec.arrival_time > self.sched.ttft_bypass_seconds
        } else {
            r.drain_time() < self.sched.critical_buffer_seconds
        }
    }

    fn try_prefill(&mut self) -> bool {
        let slots = self.cfg.max_batch.saturating_sub(self.active_slots());
        if slots == 0 {
            return false;
        }
        let cands: Vec<PrefillCandidate> = self
            .ids_in(Phase::Admitted)
            .into_iter()
            .take(slots)
            .map(|id| {
                let r = &self.reqs[id as usize];
                PrefillCandidate {
                    request_id: id,
                    arrival_time: r.spec.arrival_time,
                    tokens: r.prefill_tokens().max(r.reserved) - r.charge(),
                    critical: self.prefill_critical(r),
                }
            })
            .collect();
        if cands.is_empty() {
            return false;
        }
        let parts = partition_prefill(&cands, self.free_mem());
        let Some(batch) = parts.into_iter().next() else {
            return false;
        };
        let mut tokens = 0;
        for &id in &batch {
            let r = &mut self.reqs[id as usize];
            r.phase = Phase::Prefilling;
            r.kv.total_kv = r.prefill_tokens();
            r.kv.gpu_resident = r.kv.total_kv;
            tokens += r.kv.total_kv;
        }
        let duration = self.cm.prefill_time(tokens) + self.take_tick_cost();
        self.start_compute(ComputeKind::Prefill, batch, duration, tokens);
        true
    }

    fn try_prefill_chunk(&mut self) -> bool {
        let Some(id) = self.ids_in(Phase::Admitted).into_iter().next() else {
            return false;
        };
        let running = self.active_slots();
        let r = &mut self.reqs[id as usize];
        if r.chunk_progress == 0 && running >= self.cfg.max_batch {
            return false;
        }
        let total = r.prefill_tokens();
        let chunk = (self.sched.prefill_chunk_tokens as u64).min(total - r.chunk_progress);
        r.phase = Phase::Prefilling;
        r.kv.total_kv = total;
        r.kv.gpu_resident = r.chunk_progress + chunk;
        self.last_step_decode = false;
        let duration = self.cm.prefill_time(chunk) + self.take_tick_cost();
        self.start_compute(ComputeKind::PrefillChunk, vec![id], duration, chunk);
        true
    }

    fn try_decode(&mut self) {
        let mut batch = self.ids_in(Phase::Running);
        batch.truncate(self.cfg.max_batch);
        loop {
            let growth: u64 = batch
                .iter()
                .map(|&id| {
                    let r = &self.reqs[id as usize];
                    u64::from(r.kv.gpu_resident + 1 > r.reserved)
                })
                .sum();
            if self.used_mem() + growth <= self.cfg.gpu_mem_tokens || batch.is_empty() {
                break;
            }
            let victim = self.pressure_victim(&batch);
            batch.retain(|&id| id != victim);
            let drop = self.policy != Policy::Tokenflow || !self.cfg.kv.offload;
            self.preempt(victim, drop);
        }
        if batch.is_empty() {
            return;
        }
        let ctx: u64 = batch.iter().map(|&id| self.reqs[id as usize].kv.total_kv).sum();
        let duration = self.cm.decode_iteration_time(batch.len(), ctx) + self.take_tick_cost();
        if self.policy == Policy::Tokenflow && self.cfg.kv.write_through {
            self.plan_write_through(&batch, duration);
        }
        self.last_step_decode = true;
        self.start_compute(ComputeKind::Decode, batch, duration, 0);
    }

    fn pressure_victim(&self, batch: &[RequestId]) -> RequestId {
        let key = |id: &&RequestId| {
            let r = &self.reqs[**id as usize];
            (r.drain_time(), r.admit_seq, **id)
        };
        if self.policy.reserves_output() {
            *batch
                .iter()
                .max_by_key(|&&id| (self.reqs[id as usize].admit_seq, id))
                .expect("non-empty batch")
        } else {
            *batch
                .iter()
                .max_by(|a, b| {
                    let (x, y) = (key(a), key(b));
                    x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2))
                })
                .expect("non-empty batch")
        }
    }

    // ---- KV movement ----

    fn enqueue(&mut self, owner: RequestId, tokens: u64, kind: ChunkKind) -> u32 {
        let mut n = 0;
        for c in chunked(tokens, self.cfg.chunk_tokens) {
            self.next_chunk += 1;
            let chunk = Chunk {
                id: self.next_chunk,
                owner,
                tokens: c,
                kind,
                queued_at: self.now,
            };
            match kind {
                ChunkKind::Load => self.h2d.enqueue(chunk),
                _ => self.d2h.enqueue(chunk),
            }
            n += 1;
        }
        n
    }

    fn transfer_state(&self) -> TransferQueueState {
        TransferQueueState {
            d2h_queued: self.d2h.backlog_tokens(),
            h2d_queued: self.h2d.backlog_tokens(),
            measured_d2h_rate: self.d2h.measured_rate(),
            measured_h2d_rate: self.h2d.measured_rate(),
        }
    }

    fn plan_write_through(&mut self, batch: &[RequestId], interval: f64) {
        let pending: Vec<PendingWrite> = batch
            .iter()
            .map(|&id| {
                let r = &self.reqs[id as usize];
                PendingWrite {
                    owner: id,
                    tokens: r.kv.unsynced_pending(),
                    buffer: r.occupancy(),
                }
            })
            .collect();
        let plan = plan_write_chunk(&pending, interval, self.d2h.measured_rate(), self.d2h.backlog_tokens());
        for w in plan {
            self.enqueue(w.owner, w.tokens, ChunkKind::WriteThrough);
            self.reqs[w.owner as usize].kv.inflight_d2h += w.tokens;
        }
    }

    fn preempt(&mut self, id: RequestId, drop: bool) {
        self.stats.preemptions += 1;
        let reserves = self.policy.reserves_output();
        let r = &mut self.reqs[id as usize];
        r.rec.preemptions += 1;
        if drop {
            r.kv.gpu_resident = 0;
            r.reserved = 0;
            r.recompute = true;
            r.phase = if reserves { Phase::Waiting } else { Phase::Paused };
            let cancelled: u64 = self
                .d2h
                .cancel_where(|c| c.owner == id)
                .iter()
                .map(|c| c.tokens)
                .sum();
            let r = &mut self.reqs[id as usize];
            r.kv.inflight_d2h -= cancelled;
            return;
        }
        let plan = match kvstore::preempt(&r.kv) {
            Ok(p) => p,
            Err(e) => {
                self.violate("preempt", e.to_string());
                return;
            }
        };
        r.kv.gpu_resident -= plan.instant_release;
        let residual = r.kv.unsynced_pending();
        r.kv.inflight_d2h += residual;
        r.phase = if r.kv.inflight_d2h > 0 { Phase::Evicting } else { Phase::Paused };
        self.enqueue(id, residual, ChunkKind::Eviction);
    }

    fn start_load(&mut self, id: RequestId) {
        let plan = match kvstore::resume(&self.reqs[id as usize].kv, self.cfg.chunk_tokens) {
            Ok(p) => p,
            Err(e) => {
                self.violate("resume", e.to_string());
                return;
            }
        };
        let n = self.enqueue(id, plan.h2d_tokens, ChunkKind::Load);
        let r = &mut self.reqs[id as usize];
        if n == 0 {
            r.phase = Phase::Running;
            r.rec.loads += 1;
            self.stats.loads += 1;
            return;
        }
        r.kv.inflight_h2d += plan.h2d_tokens;
        r.loads_pending = n;
        r.phase = Phase::Loading;
    }

    fn pump_transfers(&mut self) {
        if !self.cfg.kv.overlap {
            self.pump_half_duplex();
            return;
        }
        if !self.d2h.is_busy() {
            if let Some(done) = self.d2h.start_next(self.now, &self.cm) {
                let id = self.d2h.in_service().expect("just started").chunk.id;
                self.note_start(0, id);
                self.queue.push(done, EventKind::ChunkTransferDone, id);
            }
        }
        if !self.h2d.is_busy() {
            self.start_load_chunk();
        }
    }

    /// Without load-evict overlap the link is half-duplex: one transfer at a
    /// time in enqueue order, except that a load waiting for memory lets
    /// writes pass.
    fn pump_half_duplex(&mut self) {
        if self.d2h.is_busy() || self.h2d.is_busy() {
            return;
        }
        let d2h_head = self.d2h.head().map(|c| c.id);
        let h2d_head = self.h2d.head().map(|c| c.id);
        let load_first = match (d2h_head, h2d_head) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(d), Some(h)) => h < d,
        };
        if load_first && self.start_load_chunk() {
            return;
        }
        if let Some(done) = self.d2h.start_next(self.now, &self.cm) {
            let id = self.d2h.in_service().expect("just started").chunk.id;
            self.note_start(0, id);
            self.queue.push(done, EventKind::ChunkTransferDone, id);
        }
    }

    fn start_load_chunk(&mut self) -> bool {
        let Some(head) = self.h2d.head().copied() else {
            return false;
        };
        if head.tokens > self.free_mem() {
            return false;
        }
        self.reqs[head.owner as usize].kv.gpu_resident += head.tokens;
        let done = self.h2d.start_next(self.now, &self.cm).expect("idle channel with a head");
        self.note_start(1, head.id);
        self.queue.push(done, EventKind::ChunkTransferDone, head.id);
        true
    }

    fn note_start(&mut self, ch: usize, chunk_id: u64) {
        if let Some((prev_id, prev_done)) = self.last_started[ch] {
            if chunk_id <= prev_id || self.now < prev_done {
                let msg = format!("chunk {chunk_id} started at {} after chunk {prev_id} done at {prev_done}", self.now);
                self.violate("channel_fifo", msg);
            }
        }
        let done = if ch == 0 { self.d2h.in_service() } else { self.h2d.in_service() }
            .map(|s| s.done_at)
            .unwrap_or(self.now);
        self.last_started[ch] = Some((chunk_id, done));
    }

    fn on_transfer_done(&mut self, ev: SimEvent) {
        let d2h_match = self.d2h.in_service().is_some_and(|s| s.chunk.id == ev.subject);
        let channel = if d2h_match { &mut self.d2h } else { &mut self.h2d };
        let direction = channel.direction;
        let Some(done) = channel.finish() else {
            self.violate("channel", format!("unknown chunk {}", ev.subject));
            return;
        };
        let c = done.chunk;
        let r = &mut self.reqs[c.owner as usize];
        match direction {
            Direction::D2h => {
                if r.phase != Phase::Finished {
                    r.kv.inflight_d2h -= c.tokens;
                    r.kv.cpu_synced = (r.kv.cpu_synced + c.tokens).min(r.kv.total_kv);
                    if matches!(r.phase, Phase::Evicting | Phase::Paused) {
                        r.kv.gpu_resident = r.kv.gpu_resident.saturating_sub(c.tokens);
                    }
                    if r.phase == Phase::Evicting && r.kv.inflight_d2h == 0 {
                        r.phase = Phase::Paused;
                    }
                }
                match c.kind {
                    ChunkKind::Eviction => self.stats.tokens_evicted += c.tokens,
                    _ => self.stats.tokens_written_through += c.tokens,
                }
            }
            Direction::H2d => {
                if r.phase == Phase::Loading {
                    r.kv.inflight_h2d -= c.tokens;
                    r.loads_pending -= 1;
                    if r.loads_pending == 0 {
                        if !self.cfg.kv.write_through {
                            // write-back: swap-in releases the host copy
                            r.kv.cpu_synced = 0;
                        }
                        r.phase = Phase::Running;
                        r.rec.loads += 1;
                        self.stats.loads += 1;
                    }
                }
                self.stats.tokens_loaded += c.tokens;
            }
        }
        let info = TransferInfo {
            direction,
            owner: c.owner,
            tokens: c.tokens,
            queued_at: c.queued_at,
            started_at: done.started_at,
            done_at: done.done_at,
            eviction: c.kind == ChunkKind::Eviction,
        };
        self.log_event(ev, Some(info), None, Vec::new());
    }

    // ---- scheduling ----

    fn needs_service(&self) -> usize {
        self.reqs
            .iter()
            .filter(|r| {
                matches!(
                    r.phase,
                    Phase::Waiting | Phase::Admitted | Phase::Paused | Phase::Evicting | Phase::Loading
                )
            })
            .count()
    }

    fn active_buffers(&self) -> Vec<ActiveBuffer> {
        self.reqs
            .iter()
            .filter(|r| r.phase == Phase::Running)
            .map(|r| ActiveBuffer {
                b_rem: r.occupancy() as f64,
                rate: r.spec.consume_rate,
            })
            .collect()
    }

    fn schedule_tick(&mut self) {
        if !self.policy.uses_ticks() || self.tick_pending {
            return;
        }
        let due = self.needs_service() > 0 || any_critical(&self.active_buffers(), self.sched);
        if !due {
            return;
        }
        let at = match self.last_tick {
            Some(t) => self.now.max(t + self.sched.schedule_interval),
            None => self.now,
        };
        self.tick_pending = true;
        self.queue.push(at, EventKind::ScheduleTick, 0);
    }

    fn headroom(&self, r: &Req) -> u64 {
        let per_token = self.cm.decode_iteration_time(1, 0);
        let ahead = (self.sched.schedule_interval / per_token).ceil() as u64;
        ahead.min((r.spec.output_len - r.buf.generated) as u64)
    }

    fn candidates(&self) -> Vec<TickCandidate> {
        let tq = self.transfer_state();
        self.reqs
            .iter()
            .filter_map(|r| {
                let state = match r.phase {
                    Phase::Waiting => CandidateState::Waiting,
                    Phase::Admitted => CandidateState::Admitted,
                    Phase::Running => CandidateState::Running,
                    Phase::Paused => CandidateState::Paused,
                    Phase::Evicting => CandidateState::Evicting,
                    Phase::Loading | Phase::Prefilling => CandidateState::Loading,
                    Phase::NotArrived | Phase::Finished => return None,
                };
                let unsynced = r.kv.total_kv.saturating_sub(r.kv.cpu_synced + r.kv.inflight_d2h);
                let resident_missing = r.kv.total_kv.saturating_sub(r.kv.gpu_resident);
                let tau_evict = if r.phase == Phase::Running {
                    kvstore::io_overhead_estimate(unsynced, 0, &tq)
                } else {
                    0.0
                };
                let load_tokens = if r.phase == Phase::Running { r.kv.total_kv } else { resident_missing };
                Some(TickCandidate {
                    id: r.spec.id,
                    arrival_time: r.spec.arrival_time,
                    rate: r.spec.consume_rate,
                    prompt_len: r.spec.prompt_len,
                    output_len: r.spec.output_len,
                    generated: r.buf.generated,
                    b_rem: r.occupancy() as f64,
                    total_kv: r.kv.total_kv.max(r.prefill_tokens()),
                    headroom: self.headroom(r),
                    state,
                    t_prime: r.t_prime,
                    tau_evict,
                    tau_load: kvstore::io_overhead_estimate(0, load_tokens, &tq),
                    resumable: !r.recompute && r.kv.resumable(),
                })
            })
            .collect()
    }

    fn on_tick(&mut self, ev: SimEvent) -> Result<()> {
        self.tick_pending = false;
        let waiting = self.needs_service();
        if !should_tick(self.now, self.last_tick, waiting, &self.active_buffers(), self.sched) {
            self.log_event(ev, None, None, Vec::new());
            return Ok(());
        }
        self.stats.ticks += 1;
        self.last_tick = Some(self.now);
        let alpha = self.sched.t_prime_smoothing;
        for r in &mut self.reqs {
            if r.run_since_tick > 0.0 {
                r.t_prime = alpha * r.run_since_tick + (1.0 - alpha) * r.t_prime;
                r.run_since_tick = 0.0;
            }
        }
        let gamma = self.estimator.estimate(self.now).tokens_per_second;
        let ctx = TickContext {
            now: self.now,
            policy: self.policy,
            gamma,
            mem_tokens: self.cfg.gpu_mem_tokens,
            max_batch: self.cfg.max_batch,
            prefill_per_token: self.prefill_tracker.seconds_per_token(),
            offload: self.cfg.kv.offload,
        };
        let plan = plan_tick(&self.candidates(), &ctx, self.sched);
        let decision = DecisionRecord {
            time: self.now,
            mode: plan.mode.unwrap_or(SchedulerMode::BufferAware),
            gamma,
            rate_sum: plan.rate_sum,
            admitted: plan.admitted.clone(),
            deferred: plan.deferred.clone(),
            preempted: plan.preempted.clone(),
            resumed: plan.resumed.clone(),
            recomputed: plan.recomputed.clone(),
        };
        let acted = decision.acted();
        let idle = self.compute.is_none() && !self.d2h.is_busy() && !self.h2d.is_busy();
        if !acted && idle && self.events_since_tick == 0 {
            self.idle_ticks += 1;
            if self.idle_ticks >= IDLE_TICK_LIMIT {
                return Err(Error::Deadlock {
                    time: self.now,
                    remaining: self.reqs.len() - self.finished,
                });
            }
        } else {
            self.idle_ticks = 0;
        }
        self.events_since_tick = 0;
        self.decisions.push(decision.clone());
        self.log_event(ev, None, Some(decision), Vec::new());
        self.pending_plan = Some(plan);
        Ok(())
    }

    fn apply_plan(&mut self, plan: TickPlan) {
        let mut switched = false;
        for &id in &plan.admitted {
            let r = &mut self.reqs[id as usize];
            if r.phase == Phase::Waiting {
                self.admit_seq += 1;
                r.phase = Phase::Admitted;
                r.admit_seq = self.admit_seq;
            }
        }
        let drop = self.policy == Policy::Qoe || !self.cfg.kv.offload;
        for &id in &plan.preempted {
            if self.reqs[id as usize].phase == Phase::Running {
                self.preempt(id, drop);
                switched = true;
            }
        }
        for &id in &plan.resumed {
            let r = &self.reqs[id as usize];
            if r.phase == Phase::Paused && !r.recompute {
                self.start_load(id);
                switched = true;
            }
        }
        for &id in &plan.recomputed {
            let r = &mut self.reqs[id as usize];
            if r.phase == Phase::Paused {
                r.recompute = true;
                r.kv.gpu_resident = 0;
                r.phase = Phase::Admitted;
                switched = true;
            }
        }
        if switched {
            self.pending_tick_cost = self.cm.schedule_tick_cost;
        }
    }

    // ---- instant boundary ----

    fn end_of_instant(&mut self) {
        self.pump_transfers();
        self.dispatch();
        self.pump_transfers();
        self.schedule_tick();
        if self.cfg.check_invariants {
            self.check_invariants();
        }
    }

    fn check_invariants(&mut self) {
        let mut found = Vec::new();
        let used = self.used_mem();
        if used > self.cfg.gpu_mem_tokens {
            found.push(("memory", format!("{used} tokens resident, capacity {}", self.cfg.gpu_mem_tokens)));
        }
        for (i, r) in self.reqs.iter().enumerate() {
            let b = &r.buf;
            if !(b.consumed <= b.generated && b.generated <= b.output_len) {
                found.push(("conservation", format!("request {i}: consumed {} generated {}", b.consumed, b.generated)));
            }
            if r.rec.gen_times.len() != b.generated as usize || r.rec.consume_times.len() != b.consumed as usize {
                found.push(("conservation", format!("request {i}: record length mismatch")));
            }
            if r.phase != Phase::Finished {
                if r.kv.cpu_synced > r.kv.total_kv || r.kv.gpu_resident > r.kv.total_kv {
                    found.push(("kv_bounds", format!("request {i}: {:?}", r.kv)));
                }
                if self.cfg.kv.write_through && r.kv.cpu_synced < self.synced_seen[i] {
                    found.push(("write_through", format!("request {i}: pointer moved back")));
                }
                self.synced_seen[i] = r.kv.cpu_synced;
            }
        }
        for (what, msg) in found {
            self.violate(what, msg);
        }
    }

    fn check_final(&mut self) {
        let mut found = Vec::new();
        for r in &self.reqs {
            if !r.rec.is_complete() || r.buf.consumed != r.spec.output_len {
                found.push(format!("request {} incomplete", r.spec.id));
            }
        }
        for msg in found {
            self.violate("completion", msg);
        }
    }
}

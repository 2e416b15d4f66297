use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::cost::Direction;
use crate::scheduler::SchedulerMode;
use crate::RequestId;

/// Event kinds, declared in tie-break order: at equal times a lower kind is
/// processed first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RequestDone,
    ChunkTransferDone,
    DecodeIterDone,
    PrefillDone,
    Consume,
    Arrival,
    ScheduleTick,
}

/// A queued simulation event. `subject` is a request id, a batch id, or a
/// chunk id depending on the kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    pub subject: u64,
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    event: SimEvent,
    seq: u64,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .event
            .time
            .total_cmp(&self.event.time)
            .then(other.event.kind.cmp(&self.event.kind))
            .then(other.event.subject.cmp(&self.event.subject))
            .then(other.seq.cmp(&self.seq))
    }
}

/// Min-queue over `(time, kind, subject, insertion order)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Queued>,
    seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: EventKind, subject: u64) {
        debug_assert!(time.is_finite());
        self.seq += 1;
        self.heap.push(Queued {
            event: SimEvent {
                time,
                kind,
                subject,
            },
            seq: self.seq,
        });
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|q| q.event)
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|q| q.event.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Bandwidth-accounting fields of a completed chunk transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferInfo {
    pub direction: Direction,
    pub owner: RequestId,
    pub tokens: u64,
    pub queued_at: f64,
    pub started_at: f64,
    pub done_at: f64,
    /// True for preemption evictions, false for write-through syncs and loads.
    pub eviction: bool,
}

/// What a scheduling tick decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub time: f64,
    pub mode: SchedulerMode,
    /// Throughput capacity estimate used for the schedulability check.
    pub gamma: f64,
    /// Sum of consumption rates over the working set at tick time.
    pub rate_sum: f64,
    pub admitted: Vec<RequestId>,
    /// Waiting requests the tick could not admit.
    pub deferred: Vec<RequestId>,
    pub preempted: Vec<RequestId>,
    pub resumed: Vec<RequestId>,
    pub recomputed: Vec<RequestId>,
}

impl DecisionRecord {
    pub fn acted(&self) -> bool {
        !(self.admitted.is_empty()
            && self.preempted.is_empty()
            && self.resumed.is_empty()
            && self.recomputed.is_empty())
    }
}

/// One line of the exported event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub time: f64,
    pub kind: EventKind,
    pub subject: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionRecord>,
    /// Tokens produced by a decode iteration or prefill batch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requests: Vec<RequestId>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_kind_then_subject() {
        let mut q = EventQueue::default();
        q.push(1.0, EventKind::ScheduleTick, 0);
        q.push(1.0, EventKind::Arrival, 5);
        q.push(1.0, EventKind::Arrival, 2);
        q.push(1.0, EventKind::RequestDone, 9);
        q.push(0.5, EventKind::ScheduleTick, 0);
        let order: Vec<_> = std::iter::from_fn(|| q.pop())
            .map(|e| (e.time, e.kind, e.subject))
            .collect();
        assert_eq!(
            order,
            vec![
                (0.5, EventKind::ScheduleTick, 0),
                (1.0, EventKind::RequestDone, 9),
                (1.0, EventKind::Arrival, 2),
                (1.0, EventKind::Arrival, 5),
                (1.0, EventKind::ScheduleTick, 0),
            ]
        );
    }
}

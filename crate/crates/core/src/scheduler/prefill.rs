use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::RequestId;

/// Sliding window over recent prefill batches, giving the per-token prefill
/// latency used to price recomputation.
#[derive(Debug, Clone)]
pub struct PrefillTracker {
    capacity: usize,
    fallback_per_token: f64,
    batches: VecDeque<(u64, f64)>,
}

impl PrefillTracker {
    pub fn new(capacity: usize, fallback_per_token: f64) -> Self {
        Self {
            capacity: capacity.max(1),
            fallback_per_token,
            batches: VecDeque::new(),
        }
    }

    pub fn record(&mut self, tokens: u64, duration: f64) {
        if tokens == 0 {
            return;
        }
        if self.batches.len() == self.capacity {
            self.batches.pop_front();
        }
        self.batches.push_back((tokens, duration));
    }

    pub fn seconds_per_token(&self) -> f64 {
        let (tokens, secs) = self
            .batches
            .iter()
            .fold((0u64, 0.0), |(t, s), &(n, d)| (t + n, s + d));
        if tokens == 0 {
            self.fallback_per_token
        } else {
            secs / tokens as f64
        }
    }

    pub fn recompute_time(&self, context_tokens: u64) -> f64 {
        self.seconds_per_token() * context_tokens as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillCandidate {
    pub request_id: RequestId,
    pub arrival_time: f64,
    /// Tokens to prefill (prompt, or prompt plus generated for a recompute).
    pub tokens: u64,
    /// Waiting past the TTFT bypass threshold or about to stall.
    pub critical: bool,
}

/// Splits pending prefills into sub-batches that each fit `remaining_mem`.
///
/// Latency-critical requests go first as singletons; the rest are packed in
/// the given order. Requests larger than `remaining_mem` are left out.
pub fn partition_prefill(pending: &[PrefillCandidate], remaining_mem: u64) -> Vec<Vec<RequestId>> {
    let mut batches: Vec<Vec<RequestId>> = pending
        .iter()
        .filter(|p| p.critical && p.tokens <= remaining_mem)
        .map(|p| vec![p.request_id])
        .collect();
    let mut current = Vec::new();
    let mut used = 0u64;
    for p in pending.iter().filter(|p| !p.critical && p.tokens <= remaining_mem) {
        if used + p.tokens > remaining_mem {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(p.request_id);
        used += p.tokens;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: u32, tokens: u64, critical: bool) -> PrefillCandidate {
        PrefillCandidate {
            request_id: id,
            arrival_time: id as f64,
            tokens,
            critical,
        }
    }

    #[test]
    fn packs_in_order() {
        let p = [cand(0, 400, false), cand(1, 400, false), cand(2, 400, false)];
        assert_eq!(partition_prefill(&p, 900), vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn critical_request_jumps_ahead() {
        let p = [cand(0, 400, false), cand(1, 400, false), cand(2, 100, true)];
        assert_eq!(partition_prefill(&p, 900)[0], vec![2]);
    }

    #[test]
    fn nothing_fits() {
        let p = [cand(0, 400, false), cand(1, 500, true)];
        assert!(partition_prefill(&p, 300).is_empty());
    }

    #[test]
    fn tracker_window() {
        let mut t = PrefillTracker::new(2, 1e-4);
        assert_eq!(t.seconds_per_token(), 1e-4);
        t.record(100, 0.1);
        t.record(100, 0.3);
        assert!((t.seconds_per_token() - 0.002).abs() < 1e-15);
        t.record(100, 0.1);
        assert!((t.recompute_time(10) - 0.02).abs() < 1e-12);
    }
}

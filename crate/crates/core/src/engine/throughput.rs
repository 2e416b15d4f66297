use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// Throughput capacity estimate (tokens/second).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityEstimate {
    pub tokens_per_second: f64,
    /// True when no decode iteration has completed inside the window and the
    /// value is the cost-model nominal.
    pub cold_start: bool,
}

#[derive(Debug, Clone, Copy)]
struct Iteration {
    end: f64,
    tokens: u64,
    duration: f64,
}

/// Sliding-window estimate of decode capacity: tokens produced per second of
/// decode execution over the iterations that ended in the last `window`
/// seconds of virtual time.
#[derive(Debug, Clone)]
pub struct ThroughputEstimator {
    window: f64,
    nominal: f64,
    history: VecDeque<Iteration>,
}

impl ThroughputEstimator {
    pub fn new(window: f64, nominal: f64) -> Self {
        Self {
            window,
            nominal,
            history: VecDeque::new(),
        }
    }

    pub fn record(&mut self, end: f64, tokens: u64, duration: f64) {
        self.history.push_back(Iteration {
            end,
            tokens,
            duration,
        });
    }

    pub fn estimate(&mut self, now: f64) -> CapacityEstimate {
        while let Some(front) = self.history.front() {
            if front.end < now - self.window {
                self.history.pop_front();
            } else {
                break;
            }
        }
        let (tokens, busy) = self
            .history
            .iter()
            .fold((0u64, 0.0f64), |(t, d), it| (t + it.tokens, d + it.duration));
        if tokens == 0 || busy <= 0.0 {
            return CapacityEstimate {
                tokens_per_second: self.nominal,
                cold_start: true,
            };
        }
        CapacityEstimate {
            tokens_per_second: tokens as f64 / busy,
            cold_start: false,
        }
    }
}

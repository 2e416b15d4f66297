use serde::{Deserialize, Serialize};

use crate::workload::RequestSpec;
use crate::RequestId;

/// Full per-request timeline produced by a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub arrival_time: f64,
    pub prompt_len: u32,
    pub output_len: u32,
    pub consume_rate: f64,
    /// Absolute time of the first generated token.
    pub first_token_time: Option<f64>,
    /// Generation timestamp of every token, in order.
    pub gen_times: Vec<f64>,
    /// Buffer occupancy immediately after each token was appended.
    pub buffer_at_gen: Vec<u32>,
    /// Read timestamp of every token, in order.
    pub consume_times: Vec<f64>,
    pub rebuffer: f64,
    /// Time the last token was generated.
    pub generation_done: Option<f64>,
    /// Time the last token was read.
    pub completion_time: Option<f64>,
    pub preemptions: u32,
    pub loads: u32,
    pub recomputes: u32,
}

impl RequestRecord {
    pub fn new(spec: &RequestSpec) -> Self {
        Self {
            id: spec.id,
            arrival_time: spec.arrival_time,
            prompt_len: spec.prompt_len,
            output_len: spec.output_len,
            consume_rate: spec.consume_rate,
            first_token_time: None,
            gen_times: Vec::with_capacity(spec.output_len as usize),
            buffer_at_gen: Vec::with_capacity(spec.output_len as usize),
            consume_times: Vec::with_capacity(spec.output_len as usize),
            rebuffer: 0.0,
            generation_done: None,
            completion_time: None,
            preemptions: 0,
            loads: 0,
            recomputes: 0,
        }
    }

    /// Time to first token, measured from arrival.
    pub fn ttft(&self) -> Option<f64> {
        self.first_token_time.map(|t| t - self.arrival_time)
    }

    /// Gaps between consecutive generated tokens.
    pub fn inter_token_latencies(&self) -> Vec<f64> {
        self.gen_times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn is_complete(&self) -> bool {
        let n = self.output_len as usize;
        self.first_token_time.is_some()
            && self.gen_times.len() == n
            && self.buffer_at_gen.len() == n
            && self.consume_times.len() == n
            && self.completion_time.is_some()
    }
}

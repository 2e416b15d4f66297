use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Direction of a GPU/CPU KV transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// CPU to GPU (load).
    H2d,
    /// GPU to CPU (write-through sync or eviction).
    D2h,
}

/// Parametric latencies for compute and PCIe transfers.
///
/// Decode cost is affine in batch size and total context. The defaults give
/// 40 tok/s for a single request and roughly 30 tok/s per request at a batch
/// of nine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Seconds per prompt token.
    pub prefill_per_token: f64,
    /// Seconds per decode iteration regardless of batch.
    pub decode_base: f64,
    /// Seconds per request in the batch, per iteration.
    pub decode_per_request: f64,
    /// Seconds per context token in the batch, per iteration.
    pub decode_per_ctx_token: f64,
    /// CPU -> GPU tokens/second.
    pub h2d_bandwidth: f64,
    /// GPU -> CPU tokens/second.
    pub d2h_bandwidth: f64,
    /// Seconds charged to compute when a scheduling tick acts.
    pub schedule_tick_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            prefill_per_token: 1e-4,
            decode_base: 0.024,
            decode_per_request: 0.001,
            decode_per_ctx_token: 0.0,
            h2d_bandwidth: 100_000.0,
            d2h_bandwidth: 100_000.0,
            schedule_tick_cost: 0.0004,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("prefill_per_token", self.prefill_per_token),
            ("decode_base", self.decode_base),
            ("decode_per_request", self.decode_per_request),
            ("decode_per_ctx_token", self.decode_per_ctx_token),
            ("schedule_tick_cost", self.schedule_tick_cost),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "cost_model.{name} must be a finite value >= 0"
                )));
            }
        }
        for (name, v) in [("h2d_bandwidth", self.h2d_bandwidth), ("d2h_bandwidth", self.d2h_bandwidth)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("cost_model.{name} must be > 0")));
            }
        }
        if self.decode_base + self.decode_per_request <= 0.0 {
            return Err(Error::InvalidConfig(
                "cost_model: a single-request decode iteration must take positive time".into(),
            ));
        }
        Ok(())
    }

    pub fn decode_iteration_time(&self, batch_size: usize, total_ctx: u64) -> f64 {
        self.decode_base
            + self.decode_per_request * batch_size as f64
            + self.decode_per_ctx_token * total_ctx as f64
    }

    pub fn prefill_time(&self, prompt_len: u64) -> f64 {
        self.prefill_per_token * prompt_len as f64
    }

    pub fn bandwidth(&self, direction: Direction) -> f64 {
        match direction {
            Direction::H2d => self.h2d_bandwidth,
            Direction::D2h => self.d2h_bandwidth,
        }
    }

    pub fn transfer_time(&self, n_tokens: u64, direction: Direction) -> f64 {
        if n_tokens == 0 {
            return 0.0;
        }
        n_tokens as f64 / self.bandwidth(direction)
    }

    /// Aggregate tokens/second of a full batch with no context cost; the
    /// cold-start capacity estimate.
    pub fn nominal_throughput(&self, batch_size: usize) -> f64 {
        let b = batch_size.max(1);
        b as f64 / self.decode_iteration_time(b, 0)
    }
}

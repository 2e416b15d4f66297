//! Streaming-quality metrics computed from finished request records.

use serde::{Deserialize, Serialize};

use crate::engine::record::RequestRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QosConfig {
    /// Buffer threshold as a fraction of the request's output length.
    pub buffer_threshold_frac: f64,
    /// Weight decay per token of buffer beyond the threshold.
    pub decay_alpha: f64,
    /// Penalty per second of TTFT.
    pub ttft_penalty_weight: f64,
    /// Penalty per second of rebuffering.
    pub rebuffer_penalty_weight: f64,
}

impl Default for QosConfig {
    fn default() -> Self {
        Self {
            buffer_threshold_frac: 0.10,
            decay_alpha: 0.01,
            ttft_penalty_weight: 0.5,
            rebuffer_penalty_weight: 1.0,
        }
    }
}

impl QosConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_alpha > 0.0) {
            return Err(Error::InvalidConfig("qos.decay_alpha must be > 0".into()));
        }
        if !(self.ttft_penalty_weight >= 0.0 && self.rebuffer_penalty_weight >= 0.0) {
            return Err(Error::InvalidConfig("qos penalty weights must be >= 0".into()));
        }
        if !(self.buffer_threshold_frac > 0.0 && self.buffer_threshold_frac < 1.0) {
            return Err(Error::InvalidConfig(
                "qos.buffer_threshold_frac must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectiveThroughputConfig {
    pub tau1_frac: f64,
    pub tau2_frac: f64,
}

impl Default for EffectiveThroughputConfig {
    fn default() -> Self {
        Self {
            tau1_frac: 0.10,
            tau2_frac: 0.20,
        }
    }
}

impl EffectiveThroughputConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau1_frac && self.tau1_frac < self.tau2_frac && self.tau2_frac < 1.0) {
            return Err(Error::InvalidConfig(
                "eff: require 0 < tau1_frac < tau2_frac < 1".into(),
            ));
        }
        Ok(())
    }

    /// Credit for one token generated into a buffer of `buffer` tokens.
    pub fn weight(&self, buffer: u32, output_len: u32) -> f64 {
        let b = buffer as f64;
        let lo = self.tau1_frac * output_len as f64;
        let hi = self.tau2_frac * output_len as f64;
        if b < lo {
            1.0
        } else if b >= hi {
            0.0
        } else {
            (hi - b) / (hi - lo)
        }
    }
}

/// Usefulness of a token generated into a buffer of `buffer` tokens.
pub fn token_weight(buffer: u32, output_len: u32, cfg: &QosConfig) -> f64 {
    token_weight_f(buffer as f64, output_len, cfg)
}

pub(crate) fn token_weight_f(buffer: f64, output_len: u32, cfg: &QosConfig) -> f64 {
    let tau = cfg.buffer_threshold_frac * output_len as f64;
    if buffer <= tau {
        1.0
    } else {
        (1.0 - cfg.decay_alpha * (buffer - tau)).max(0.0)
    }
}

fn require_complete(records: &[RequestRecord]) -> Result<()> {
    match records.iter().find(|r| !r.is_complete()) {
        Some(r) => Err(Error::IncompleteRecord(r.id)),
        None => Ok(()),
    }
}

/// Aggregate QoS over `total_time` seconds.
pub fn qos(records: &[RequestRecord], total_time: f64, cfg: &QosConfig) -> Result<f64> {
    require_complete(records)?;
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for r in records {
        let useful: f64 = r
            .buffer_at_gen
            .iter()
            .map(|&b| token_weight(b, r.output_len, cfg))
            .sum();
        let ttft = r.ttft().unwrap_or(0.0);
        sum += useful - cfg.ttft_penalty_weight * ttft - cfg.rebuffer_penalty_weight * r.rebuffer;
    }
    Ok(sum / total_time)
}

/// Timeliness-weighted tokens per second.
pub fn effective_throughput(
    records: &[RequestRecord],
    total_time: f64,
    cfg: &EffectiveThroughputConfig,
) -> Result<f64> {
    require_complete(records)?;
    if records.is_empty() {
        return Ok(0.0);
    }
    let credit: f64 = records
        .iter()
        .flat_map(|r| r.buffer_at_gen.iter().map(move |&b| cfg.weight(b, r.output_len)))
        .sum();
    Ok(credit / total_time)
}

pub fn raw_throughput(records: &[RequestRecord], total_time: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let tokens: usize = records.iter().map(|r| r.gen_times.len()).sum();
    tokens as f64 / total_time
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtftStats {
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
}

/// Nearest-rank percentile of an ascending slice, with rank
/// `ceil(p/100 * (n + 1))` clamped to `n`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((p / 100.0) * (n as f64 + 1.0)).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn ttft_stats(records: &[RequestRecord]) -> Result<TtftStats> {
    let mut ttfts = records
        .iter()
        .map(|r| r.ttft().ok_or(Error::IncompleteRecord(r.id)))
        .collect::<Result<Vec<f64>>>()?;
    if ttfts.is_empty() {
        return Err(Error::EmptyInput);
    }
    ttfts.sort_by(f64::total_cmp);
    Ok(TtftStats {
        mean: ttfts.iter().sum::<f64>() / ttfts.len() as f64,
        p50: percentile(&ttfts, 50.0),
        p99: percentile(&ttfts, 99.0),
    })
}

pub fn total_rebuffer(records: &[RequestRecord]) -> f64 {
    records.iter().map(|r| r.rebuffer).sum()
}

/// Rebuffer time rebuilt from generation timestamps alone: the reader starts
/// at the first token and thereafter reads every `1/rate` seconds after its
/// previous read, waiting for tokens that are not there yet.
///
/// Returns the read times and the total stall.
pub fn replay_reader(gen_times: &[f64], rate: f64) -> (Vec<f64>, f64) {
    let period = 1.0 / rate;
    let mut reads = Vec::with_capacity(gen_times.len());
    let mut stall = 0.0;
    for (k, &g) in gen_times.iter().enumerate() {
        let read = if k == 0 {
            g
        } else {
            let scheduled = reads[k - 1] + period;
            if g > scheduled {
                stall += g - scheduled;
                g
            } else {
                scheduled
            }
        };
        reads.push(read);
    }
    (reads, stall)
}

/// One report row per (policy, seed, ablation) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub seed: u64,
    pub qos: f64,
    pub effective_tps: f64,
    pub raw_tps: f64,
    pub ttft_mean: f64,
    pub ttft_p50: f64,
    pub ttft_p99: f64,
    pub total_rebuffer_s: f64,
    pub completion_time_s: f64,
    pub preemptions: u64,
    pub loads: u64,
    pub recomputes: u64,
}

impl MetricsReport {
    /// Metrics over the processing window ending at `total_time`.
    pub fn compute(
        policy: &str,
        seed: u64,
        records: &[RequestRecord],
        total_time: f64,
        qos_cfg: &QosConfig,
        eff_cfg: &EffectiveThroughputConfig,
    ) -> Result<Self> {
        let t = ttft_stats(records)?;
        Ok(Self {
            policy: policy.to_string(),
            seed,
            qos: qos(records, total_time, qos_cfg)?,
            effective_tps: effective_throughput(records, total_time, eff_cfg)?,
            raw_tps: raw_throughput(records, total_time),
            ttft_mean: t.mean,
            ttft_p50: t.p50,
            ttft_p99: t.p99,
            total_rebuffer_s: total_rebuffer(records),
            completion_time_s: total_time,
            preemptions: records.iter().map(|r| r.preemptions as u64).sum(),
            loads: records.iter().map(|r| r.loads as u64).sum(),
            recomputes: records.iter().map(|r| r.recomputes as u64).sum(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    pub request_id: u32,
    pub token_index: u32,
    pub gen_time: f64,
    pub consume_time: f64,
    pub buffer_at_gen: u32,
    pub weight: f64,
}

/// Per-token timeline rows for plotting.
pub fn token_rows(records: &[RequestRecord], cfg: &QosConfig) -> Vec<TokenRow> {
    let mut rows = Vec::new();
    for r in records {
        for (j, (&g, &b)) in r.gen_times.iter().zip(&r.buffer_at_gen).enumerate() {
            rows.push(TokenRow {
                request_id: r.id,
                token_index: j as u32,
                gen_time: g,
                consume_time: r.consume_times.get(j).copied().unwrap_or(f64::NAN),
                buffer_at_gen: b,
                weight: token_weight(b, r.output_len, cfg),
            });
        }
    }
    rows
}

pub fn token_rows_csv(records: &[RequestRecord], cfg: &QosConfig) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in token_rows(records, cfg) {
        w.serialize(row)
            .map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::RequestSpec;

    fn record(ttft: f64, buffers: &[u32], rebuffer: f64) -> RequestRecord {
        let spec = RequestSpec {
            id: 0,
            arrival_time: 0.0,
            prompt_len: 8,
            output_len: buffers.len() as u32,
            consume_rate: 1.0,
        };
        let mut r = RequestRecord::new(&spec);
        r.first_token_time = Some(ttft);
        for (j, &b) in buffers.iter().enumerate() {
            r.gen_times.push(ttft + j as f64);
            r.buffer_at_gen.push(b);
            r.consume_times.push(ttft + j as f64);
        }
        r.rebuffer = rebuffer;
        r.generation_done = r.gen_times.last().copied();
        r.completion_time = r.consume_times.last().copied();
        r
    }

    #[test]
    fn weight_is_continuous_at_threshold() {
        let cfg = QosConfig::default();
        let at = token_weight_f(50.0, 500, &cfg);
        let above = token_weight_f(50.0 + 1e-9, 500, &cfg);
        assert_eq!(at, 1.0);
        assert!((at - above).abs() < 1e-9);
    }

    #[test]
    fn weight_clamps_and_decays() {
        let cfg = QosConfig::default();
        assert!((token_weight(70, 500, &cfg) - 0.8).abs() < 1e-12);
        assert_eq!(token_weight(200, 500, &cfg), 0.0);
    }

    #[test]
    fn effective_envelope() {
        let cfg = EffectiveThroughputConfig::default();
        let near_empty = record(0.0, &[1; 20], 0.0);
        let raw = raw_throughput(std::slice::from_ref(&near_empty), 4.0);
        let eff = effective_throughput(std::slice::from_ref(&near_empty), 4.0, &cfg).unwrap();
        assert_eq!(raw, eff);
        let run_ahead = record(0.0, &[15; 20], 0.0);
        assert_eq!(effective_throughput(&[run_ahead], 4.0, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn incomplete_records_are_rejected() {
        let mut r = record(1.0, &[0; 3], 0.0);
        r.consume_times.pop();
        assert!(matches!(
            qos(&[r], 1.0, &QosConfig::default()),
            Err(Error::IncompleteRecord(0))
        ));
    }

    #[test]
    fn replay_matches_hand_timeline() {
        // reader at 1 tok/s; token 3 arrives 0.5 s late
        let (reads, stall) = replay_reader(&[0.0, 0.2, 2.5, 2.6], 1.0);
        assert_eq!(reads, vec![0.0, 1.0, 2.5, 3.5]);
        assert!((stall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn percentile_ranks() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 6.0);
        assert_eq!(percentile(&v, 100.0), 10.0);
        assert_eq!(percentile(&[4.0], 1.0), 4.0);
    }

    proptest::proptest! {
        #[test]
        fn weight_non_increasing(b in 0u32..1000, len in 1u32..2000) {
            let cfg = QosConfig::default();
            let w0 = token_weight(b, len, &cfg);
            let w1 = token_weight(b + 1, len, &cfg);
            proptest::prop_assert!(w1 <= w0);
            proptest::prop_assert!((0.0..=1.0).contains(&w0));
        }

        #[test]
        fn effective_bounded_by_raw(buffers in proptest::collection::vec(0u32..60, 1..50)) {
            let r = record(0.5, &buffers, 0.0);
            let cfg = EffectiveThroughputConfig::default();
            let eff = effective_throughput(std::slice::from_ref(&r), 3.0, &cfg).unwrap();
            let raw = raw_throughput(std::slice::from_ref(&r), 3.0);
            proptest::prop_assert!(eff >= 0.0 && eff <= raw + 1e-12);
        }

        #[test]
        fn qos_strictly_decreasing_in_penalties(ttft in 0.0f64..5.0, rb in 0.0f64..5.0, d in 0.01f64..1.0) {
            let cfg = QosConfig::default();
            let base = qos(&[record(ttft, &[0; 5], rb)], 10.0, &cfg).unwrap();
            proptest::prop_assert!(qos(&[record(ttft + d, &[0; 5], rb)], 10.0, &cfg).unwrap() < base);
            proptest::prop_assert!(qos(&[record(ttft, &[0; 5], rb + d)], 10.0, &cfg).unwrap() < base);
        }
    }
}

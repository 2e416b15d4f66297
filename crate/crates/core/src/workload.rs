//! Request traces: synthetic burst and Poisson generators plus a CSV loader.
//!
//! Generators draw from independent ChaCha sub-streams derived from one seed
//! (arrivals, prompt lengths, output lengths, consumption rates), so adding a
//! new sampled field never perturbs the existing ones.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::RequestId;

/// Header line of the trace CSV format.
pub const TRACE_HEADER: &str = "id,arrival_s,prompt_tokens,output_tokens,rate_tps";

const STREAM_ARRIVALS: u64 = 1;
const STREAM_PROMPT: u64 = 2;
const STREAM_OUTPUT: u64 = 3;
const STREAM_RATES: u64 = 4;

/// Tolerance on rate-profile weights summing to one.
const PROFILE_WEIGHT_TOLERANCE: f64 = 1e-9;

/// One streaming request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub id: RequestId,
    /// Seconds since the start of the trace.
    pub arrival_time: f64,
    pub prompt_len: u32,
    pub output_len: u32,
    /// Reader consumption rate in tokens/second.
    pub consume_rate: f64,
}

impl RequestSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_time >= 0.0) || !self.arrival_time.is_finite() {
            return Err(Error::invariant(
                "arrival_time",
                format!("request {}: {} is not a finite value >= 0", self.id, self.arrival_time),
            ));
        }
        if self.prompt_len < 1 {
            return Err(Error::invariant(
                "prompt_len",
                format!("request {}: must be >= 1", self.id),
            ));
        }
        if self.output_len < 1 {
            return Err(Error::invariant(
                "output_len",
                format!("request {}: must be >= 1", self.id),
            ));
        }
        if !(self.consume_rate > 0.0) || !self.consume_rate.is_finite() {
            return Err(Error::invariant(
                "consume_rate",
                format!("request {}: {} is not a finite value > 0", self.id, self.consume_rate),
            ));
        }
        Ok(())
    }
}

/// Requests ordered by arrival time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub requests: Vec<RequestSpec>,
    /// Seed used to generate the trace; `None` for file traces.
    pub seed: Option<u64>,
}

impl Trace {
    /// Validates per-request invariants, id density and arrival ordering.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.requests.len()];
        for r in &self.requests {
            r.validate()?;
            let idx = r.id as usize;
            if idx >= seen.len() || seen[idx] {
                return Err(Error::invariant(
                    "id",
                    format!("ids must be unique and dense in 0..{}; got {}", seen.len(), r.id),
                ));
            }
            seen[idx] = true;
        }
        for pair in self.requests.windows(2) {
            if pair[1].arrival_time < pair[0].arrival_time {
                return Err(Error::invariant(
                    "arrival_time",
                    "requests are not sorted by arrival time",
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Writes the trace in the CSV trace format, header included.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.requests {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id, r.arrival_time, r.prompt_len, r.output_len, r.consume_rate
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    Burst,
    Poisson,
    File,
}

/// Normal length distribution truncated at one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthDist {
    pub mean: f64,
    pub stddev: f64,
}

impl LengthDist {
    /// Stddev defaults to a quarter of the mean.
    pub fn with_default_spread(mean: f64) -> Self {
        Self {
            mean,
            stddev: mean / 4.0,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        if !(self.mean >= 1.0) || !self.mean.is_finite() {
            return Err(Error::InvalidConfig(format!("{field}.mean must be >= 1")));
        }
        if !(self.stddev >= 0.0) || !self.stddev.is_finite() {
            return Err(Error::InvalidConfig(format!("{field}.stddev must be >= 0")));
        }
        Ok(())
    }

    /// Resamples until the rounded value is at least one token; after a
    /// bounded number of attempts the sample is floored at one.
    pub fn sample(&self, rng: &mut impl Rng) -> u32 {
        let normal = Normal::new(self.mean, self.stddev).expect("validated distribution");
        for _ in 0..64 {
            let v = normal.sample(rng).round();
            if v >= 1.0 {
                return v.min(u32::MAX as f64) as u32;
            }
        }
        1
    }
}

/// One entry of a discrete consumption-rate distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateWeight {
    pub rate: f64,
    pub weight: f64,
}

/// Discrete distribution over reader consumption rates (tokens/second).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RateProfile(pub Vec<RateWeight>);

impl RateProfile {
    pub fn single(rate: f64) -> Self {
        Self(vec![RateWeight { rate, weight: 1.0 }])
    }

    pub fn new(entries: &[(f64, f64)]) -> Self {
        Self(
            entries
                .iter()
                .map(|&(rate, weight)| RateWeight { rate, weight })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidProfile("profile has no entries".into()));
        }
        let mut total = 0.0;
        for e in &self.0 {
            if !(e.rate > 0.0) || !e.rate.is_finite() {
                return Err(Error::InvalidProfile(format!("rate {} must be > 0", e.rate)));
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(Error::InvalidProfile(format!(
                    "weight {} must be >= 0",
                    e.weight
                )));
            }
            total += e.weight;
        }
        if (total - 1.0).abs() > PROFILE_WEIGHT_TOLERANCE {
            return Err(Error::InvalidProfile(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Draws one rate. The profile must already be validated.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for e in &self.0 {
            acc += e.weight;
            if u < acc {
                return e.rate;
            }
        }
        // rounding slack at the top end
        self.0
            .iter()
            .rev()
            .find(|e| e.weight > 0.0)
            .map(|e| e.rate)
            .unwrap_or(self.0[0].rate)
    }
}

impl Default for RateProfile {
    fn default() -> Self {
        Self::single(20.0)
    }
}

/// Draws a single consumption rate from the profile's rate sub-stream.
pub fn sample_consumption_rate(profile: &RateProfile, seed: u64) -> Result<f64> {
    profile.validate()?;
    let mut rng = substream(seed, STREAM_RATES);
    Ok(profile.sample(&mut rng))
}

fn default_prompt() -> LengthDist {
    LengthDist::with_default_spread(512.0)
}

fn default_output() -> LengthDist {
    LengthDist::with_default_spread(1024.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub kind: WorkloadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burst_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poisson_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    /// Trace file for `kind = file`; relative paths resolve against the
    /// directory of the config that references it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "default_prompt")]
    pub prompt_len_dist: LengthDist,
    #[serde(default = "default_output")]
    pub output_len_dist: LengthDist,
    #[serde(default)]
    pub rate_profile: RateProfile,
}

impl WorkloadConfig {
    pub fn burst(size: u32, prompt_mean: f64, output_mean: f64, rates: RateProfile) -> Self {
        Self {
            kind: WorkloadKind::Burst,
            burst_size: Some(size),
            poisson_rate: None,
            duration: None,
            path: None,
            prompt_len_dist: LengthDist::with_default_spread(prompt_mean),
            output_len_dist: LengthDist::with_default_spread(output_mean),
            rate_profile: rates,
        }
    }

    pub fn poisson(
        rate: f64,
        duration: f64,
        prompt_mean: f64,
        output_mean: f64,
        rates: RateProfile,
    ) -> Self {
        Self {
            kind: WorkloadKind::Poisson,
            burst_size: None,
            poisson_rate: Some(rate),
            duration: Some(duration),
            path: None,
            prompt_len_dist: LengthDist::with_default_spread(prompt_mean),
            output_len_dist: LengthDist::with_default_spread(output_mean),
            rate_profile: rates,
        }
    }

    pub fn file(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: WorkloadKind::File,
            burst_size: None,
            poisson_rate: None,
            duration: None,
            path: Some(path.into()),
            prompt_len_dist: default_prompt(),
            output_len_dist: default_output(),
            rate_profile: RateProfile::default(),
        }
    }

    /// Checks that exactly the fields for `kind` are present and sane.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        match self.kind {
            WorkloadKind::Burst => {
                match self.burst_size {
                    Some(b) if b >= 1 => {}
                    Some(_) => return bad("burst_size must be >= 1"),
                    None => return bad("burst workload requires burst_size"),
                }
                if self.poisson_rate.is_some() || self.duration.is_some() || self.path.is_some() {
                    return bad("burst workload accepts only burst_size");
                }
            }
            WorkloadKind::Poisson => {
                match self.poisson_rate {
                    Some(r) if r > 0.0 && r.is_finite() => {}
                    Some(_) => return bad("poisson_rate must be > 0"),
                    None => return bad("poisson workload requires poisson_rate"),
                }
                match self.duration {
                    Some(d) if d > 0.0 && d.is_finite() => {}
                    Some(_) => return bad("duration must be > 0"),
                    None => return bad("poisson workload requires duration"),
                }
                if self.burst_size.is_some() || self.path.is_some() {
                    return bad("poisson workload accepts only poisson_rate and duration");
                }
            }
            WorkloadKind::File => {
                if self.path.is_none() {
                    return bad("file workload requires path");
                }
                if self.burst_size.is_some() || self.poisson_rate.is_some() || self.duration.is_some()
                {
                    return bad("file workload accepts only path");
                }
                return Ok(());
            }
        }
        self.prompt_len_dist.validate("prompt_len_dist")?;
        self.output_len_dist.validate("output_len_dist")?;
        self.rate_profile
            .validate()
            .map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Builds the trace this config describes. `base_dir` resolves relative
    /// file paths.
    pub fn build(&self, seed: u64, base_dir: Option<&Path>) -> Result<Trace> {
        match self.kind {
            WorkloadKind::Burst => generate_burst(self, seed),
            WorkloadKind::Poisson => generate_poisson(self, seed),
            WorkloadKind::File => {
                self.validate()?;
                let p = self.path.as_ref().expect("validated");
                let resolved = match base_dir {
                    Some(dir) if p.is_relative() => dir.join(p),
                    _ => p.clone(),
                };
                load_trace(resolved)
            }
        }
    }
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_requests(cfg: &WorkloadConfig, seed: u64, arrivals: &[f64]) -> Trace {
    let mut prompt_rng = substream(seed, STREAM_PROMPT);
    let mut output_rng = substream(seed, STREAM_OUTPUT);
    let mut rate_rng = substream(seed, STREAM_RATES);
    let requests = arrivals
        .iter()
        .enumerate()
        .map(|(i, &t)| RequestSpec {
            id: i as RequestId,
            arrival_time: t,
            prompt_len: cfg.prompt_len_dist.sample(&mut prompt_rng),
            output_len: cfg.output_len_dist.sample(&mut output_rng),
            consume_rate: cfg.rate_profile.sample(&mut rate_rng),
        })
        .collect();
    Trace {
        requests,
        seed: Some(seed),
    }
}

/// All requests arrive at t = 0.
pub fn generate_burst(cfg: &WorkloadConfig, seed: u64) -> Result<Trace> {
    if cfg.kind != WorkloadKind::Burst {
        return Err(Error::InvalidConfig("expected kind = burst".into()));
    }
    cfg.validate()?;
    let n = cfg.burst_size.expect("validated") as usize;
    Ok(sample_requests(cfg, seed, &vec![0.0; n]))
}

/// Exponential inter-arrival gaps, truncated at `duration`.
pub fn generate_poisson(cfg: &WorkloadConfig, seed: u64) -> Result<Trace> {
    if cfg.kind != WorkloadKind::Poisson {
        return Err(Error::InvalidConfig("expected kind = poisson".into()));
    }
    cfg.validate()?;
    let rate = cfg.poisson_rate.expect("validated");
    let duration = cfg.duration.expect("validated");
    let gaps = Exp::new(rate).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = substream(seed, STREAM_ARRIVALS);
    let mut arrivals = Vec::new();
    let mut t = 0.0;
    loop {
        t += gaps.sample(&mut rng);
        if t > duration {
            break;
        }
        arrivals.push(t);
    }
    Ok(sample_requests(cfg, seed, &arrivals))
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    id: RequestId,
    arrival_s: f64,
    prompt_tokens: i64,
    output_tokens: i64,
    rate_tps: f64,
}

/// Parses CSV trace text. The header line is optional.
pub fn parse_trace(text: &str) -> Result<Trace> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<&str> = TRACE_HEADER.split(',').collect();
    let header_record = csv::StringRecord::from(header.clone());
    let mut requests = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(idx + 1),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(idx + 1);
        if idx == 0 && rec.iter().eq(header.iter().copied()) {
            continue;
        }
        let row: TraceRow = rec.deserialize(Some(&header_record)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let to_u32 = |v: i64, field: &str| -> Result<u32> {
            u32::try_from(v).map_err(|_| {
                Error::invariant(field, format!("line {line}: {v} is out of range"))
            })
        };
        let spec = RequestSpec {
            id: row.id,
            arrival_time: row.arrival_s,
            prompt_len: to_u32(row.prompt_tokens, "prompt_len")?,
            output_len: to_u32(row.output_tokens, "output_len")?,
            consume_rate: row.rate_tps,
        };
        spec.validate()?;
        requests.push(spec);
    }
    requests.sort_by(|a, b| {
        a.arrival_time
            .total_cmp(&b.arrival_time)
            .then(a.id.cmp(&b.id))
    });
    let trace = Trace {
        requests,
        seed: None,
    };
    trace.validate()?;
    Ok(trace)
}

/// Reads and validates a CSV trace file.
pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text)
}

//! Experiment configs, policy × seed × ablation matrices and their reports.
//!
//! A config file names a workload, engine and scheduler settings, and the
//! matrix to sweep. [`run_experiment`] runs every cell (in parallel, each
//! simulation sequential), writes one report per cell and a summary table.
//! Reports contain no wall-clock data, so re-running a config reproduces
//! them byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{self, KvOptions, SimConfig, SimStats};
use crate::error::{Error, Result};
use crate::metrics::{token_rows_csv, EffectiveThroughputConfig, MetricsReport, QosConfig};
use crate::scheduler::{Policy, SchedulerConfig};
use crate::workload::{Trace, WorkloadConfig};

/// One named KV-manager variant. Only tokenflow cells are expanded over
/// ablations; the other policies ignore them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub name: String,
    #[serde(default = "on")]
    pub write_through: bool,
    #[serde(default = "on")]
    pub overlap: bool,
    #[serde(default = "on")]
    pub offload: bool,
}

fn on() -> bool {
    true
}

impl Ablation {
    pub fn kv(&self) -> KvOptions {
        KvOptions {
            write_through: self.write_through,
            overlap: self.overlap,
            offload: self.offload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default = "default_policies")]
    pub policies: Vec<Policy>,
    #[serde(default)]
    pub qos: QosConfig,
    #[serde(default)]
    pub eff: EffectiveThroughputConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ablations: Vec<Ablation>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Write each cell's event log as JSON lines.
    #[serde(default)]
    pub emit_events: bool,
    /// Directory that relative paths in the config resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_policies() -> Vec<Policy> {
    vec![Policy::Tokenflow]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn at(path: &str, e: Error) -> Error {
    let message = match e {
        Error::InvalidConfig(m) | Error::InvalidProfile(m) => m,
        other => other.to_string(),
    };
    let message = match message.strip_prefix(path) {
        Some(rest) => rest.trim_start_matches([':', '.', ' ']).to_string(),
        None => message,
    };
    Error::ConfigPath {
        path: path.to_string(),
        message,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.workload.validate().map_err(|e| at("workload", e))?;
        self.sim.validate().map_err(|e| at("sim", e))?;
        self.scheduler.validate().map_err(|e| at("scheduler", e))?;
        self.qos.validate().map_err(|e| at("qos", e))?;
        self.eff.validate().map_err(|e| at("eff", e))?;
        let bad = |path: &str, m: &str| {
            Err(Error::ConfigPath {
                path: path.to_string(),
                message: m.to_string(),
            })
        };
        if self.policies.is_empty() {
            return bad("policies", "at least one policy is required");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        for (i, a) in self.ablations.iter().enumerate() {
            if a.name.is_empty() || a.name.contains(['/', '\\']) {
                return bad(&format!("ablations[{i}].name"), "must be a non-empty file-name-safe string");
            }
            if self.ablations[..i].iter().any(|b| b.name == a.name) {
                return bad(&format!("ablations[{i}].name"), "duplicate ablation name");
            }
        }
        Ok(())
    }

    /// Every cell of the matrix in a stable order: policy, then ablation,
    /// then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &policy in &self.policies {
            let variants: Vec<Option<&Ablation>> =
                if policy == Policy::Tokenflow && !self.ablations.is_empty() {
                    self.ablations.iter().map(Some).collect()
                } else {
                    vec![None]
                };
            for ablation in variants {
                for &seed in &self.seeds {
                    cells.push(Cell {
                        policy,
                        seed,
                        ablation: ablation.map(|a| a.name.clone()),
                        kv: ablation.map_or(self.sim.kv, Ablation::kv),
                    });
                }
            }
        }
        cells
    }
}

/// Parses a config from JSON text. Errors name the path into the document.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::ConfigPath {
            path,
            message: e.into_inner().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config_str(&text)?;
    cfg.base_dir = Some(
        path.parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    );
    Ok(cfg)
}

/// Directory holding the checked-in presets.
pub fn presets_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets")
}

pub fn preset_names() -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(presets_dir())
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter_map(|e| {
                    let p = e.path();
                    (p.extension()? == "json").then(|| p.file_stem()?.to_str().map(String::from))?
                })
                .collect()
        })
        .unwrap_or_default();
    names.sort();
    names
}

pub fn load_preset(name: &str) -> Result<ExperimentConfig> {
    let path = presets_dir().join(format!("{name}.json"));
    if !path.is_file() {
        return Err(Error::InvalidConfig(format!(
            "unknown preset `{name}` (available: {})",
            preset_names().join(", ")
        )));
    }
    parse_config(path)
}

/// One (policy, seed, ablation) point of the matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub policy: Policy,
    pub seed: u64,
    pub ablation: Option<String>,
    pub kv: KvOptions,
}

impl Cell {
    /// File-name stem for this cell's outputs.
    pub fn label(&self) -> String {
        match &self.ablation {
            Some(a) => format!("{}-{a}-s{}", self.policy, self.seed),
            None => format!("{}-s{}", self.policy, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: Cell,
    pub metrics: MetricsReport,
    pub stats: SimStats,
    pub requests: usize,
    /// Time of the last event, including the final reads.
    pub total_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: Cell,
    pub error: String,
}

/// Everything a cell produces, before anything is written.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub report: CellReport,
    pub result: engine::SimResult,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<CellReport>,
    pub failures: Vec<CellFailure>,
    pub summary: Summary,
    pub output_dir: PathBuf,
}

/// Builds the trace for `seed`.
pub fn build_trace(cfg: &ExperimentConfig, seed: u64) -> Result<Trace> {
    cfg.workload.build(seed, cfg.base_dir.as_deref())
}

/// Runs one cell in memory.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<CellOutput> {
    let trace = build_trace(cfg, cell.seed)?;
    run_cell_on(cfg, cell, &trace)
}

pub fn run_cell_on(cfg: &ExperimentConfig, cell: &Cell, trace: &Trace) -> Result<CellOutput> {
    let sim = SimConfig {
        kv: cell.kv,
        seed: cell.seed,
        record_events: cfg.emit_events || cfg.sim.record_events,
        ..cfg.sim
    };
    let result = engine::run(trace, cell.policy, &cfg.scheduler, &sim)?;
    if let Some(v) = result.violations.first() {
        return Err(Error::invariant(
            "simulation",
            format!("{} violation(s), first: {v}", result.violations.len()),
        ));
    }
    let mut metrics = MetricsReport::compute(
        cell.policy.as_str(),
        cell.seed,
        &result.records,
        result.processing_time,
        &cfg.qos,
        &cfg.eff,
    )?;
    if let Some(a) = &cell.ablation {
        metrics.policy = format!("{}/{a}", cell.policy);
    }
    let report = CellReport {
        cell: cell.clone(),
        metrics,
        stats: result.stats.clone(),
        requests: result.records.len(),
        total_time_s: result.total_time,
    };
    Ok(CellOutput { report, result })
}

fn requests_csv(result: &engine::SimResult) -> Result<String> {
    #[derive(Serialize)]
    struct Row {
        id: u32,
        arrival_s: f64,
        prompt_tokens: u32,
        output_tokens: u32,
        rate_tps: f64,
        ttft_s: Option<f64>,
        generation_done_s: Option<f64>,
        completion_s: Option<f64>,
        rebuffer_s: f64,
        preemptions: u32,
        loads: u32,
        recomputes: u32,
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &result.records {
        w.serialize(Row {
            id: r.id,
            arrival_s: r.arrival_time,
            prompt_tokens: r.prompt_len,
            output_tokens: r.output_len,
            rate_tps: r.consume_rate,
            ttft_s: r.first_token_time.map(|t| t - r.arrival_time),
            generation_done_s: r.generation_done,
            completion_s: r.completion_time,
            rebuffer_s: r.rebuffer,
            preemptions: r.preemptions,
            loads: r.loads,
            recomputes: r.recomputes,
        })
        .map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn write_cell(dir: &Path, cfg: &ExperimentConfig, out: &CellOutput) -> Result<()> {
    let label = out.report.cell.label();
    let json = serde_json::to_string_pretty(&out.report)?;
    write(dir.join(format!("{label}.json")), &(json + "\n"))?;
    write(dir.join(format!("{label}.requests.csv")), &requests_csv(&out.result)?)?;
    write(
        dir.join(format!("{label}.tokens.csv")),
        &token_rows_csv(&out.result.records, &cfg.qos)?,
    )?;
    if cfg.emit_events {
        write(dir.join(format!("{label}.events.jsonl")), &out.result.event_log_jsonl())?;
    }
    Ok(())
}

/// Runs every cell, writes per-cell reports and the summary into the output
/// directory. Cell failures are collected rather than aborting the matrix.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let results: Vec<(Cell, Result<CellReport>)> = cfg
        .cells()
        .into_par_iter()
        .map(|cell| {
            let r = run_cell(cfg, &cell).and_then(|out| {
                write_cell(&dir, cfg, &out)?;
                Ok(out.report)
            });
            (cell, r)
        })
        .collect();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (cell, r) in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => failures.push(CellFailure {
                cell,
                error: e.to_string(),
            }),
        }
    }
    let summary = emit_summary(&reports);
    if !reports.is_empty() {
        write(dir.join("summary.csv"), &summary.csv)?;
        write(dir.join("summary.txt"), &summary.table)?;
    }
    if !failures.is_empty() {
        let json = serde_json::to_string_pretty(&failures)?;
        write(dir.join("failures.json"), &(json + "\n"))?;
    }
    Ok(ExperimentOutcome {
        reports,
        failures,
        summary,
        output_dir: dir,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub policy: String,
    pub ablation: String,
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
    /// Relative to the fcfs cell with the same seed.
    pub ttft_p99_reduction_pct: Option<f64>,
    pub eff_tps_gain_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub csv: String,
    pub table: String,
}

/// Percent reduction of `x` relative to `base`.
pub fn reduction_pct(base: f64, x: f64) -> Option<f64> {
    (base > 0.0).then(|| (base - x) / base * 100.0)
}

/// Percent gain of `x` relative to `base`.
pub fn gain_pct(base: f64, x: f64) -> Option<f64> {
    (base > 0.0).then(|| (x - base) / base * 100.0)
}

/// One row per cell; delta columns are filled when an fcfs cell with the
/// same seed exists and the row is not that cell.
pub fn emit_summary(reports: &[CellReport]) -> Summary {
    let baseline = |seed: u64| {
        reports
            .iter()
            .find(|r| r.cell.policy == Policy::Fcfs && r.cell.seed == seed && r.cell.ablation.is_none())
    };
    let rows: Vec<SummaryRow> = reports
        .iter()
        .map(|r| {
            let m = &r.metrics;
            let base = baseline(r.cell.seed).filter(|b| b.cell != r.cell);
            SummaryRow {
                label: r.cell.label(),
                policy: r.cell.policy.to_string(),
                ablation: r.cell.ablation.clone().unwrap_or_default(),
                seed: r.cell.seed,
                qos: m.qos,
                effective_tps: m.effective_tps,
                raw_tps: m.raw_tps,
                ttft_mean: m.ttft_mean,
                ttft_p50: m.ttft_p50,
                ttft_p99: m.ttft_p99,
                total_rebuffer_s: m.total_rebuffer_s,
                completion_time_s: m.completion_time_s,
                preemptions: m.preemptions,
                loads: m.loads,
                recomputes: m.recomputes,
                ttft_p99_reduction_pct: base.and_then(|b| reduction_pct(b.metrics.ttft_p99, m.ttft_p99)),
                eff_tps_gain_pct: base.and_then(|b| gain_pct(b.metrics.effective_tps, m.effective_tps)),
            }
        })
        .collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).expect("summary rows serialize");
    }
    let csv = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8");

    let has_deltas = rows.iter().any(|r| r.ttft_p99_reduction_pct.is_some());
    let mut table = format!(
        "{:<28} {:>9} {:>9} {:>9} {:>9} {:>10} {:>10} {:>6}",
        "cell", "ttft_p99", "eff_tps", "raw_tps", "qos", "rebuffer", "complete", "preempt"
    );
    if has_deltas {
        table.push_str(&format!(" {:>10} {:>10}", "p99_red%", "eff_gain%"));
    }
    table.push('\n');
    for r in &rows {
        table.push_str(&format!(
            "{:<28} {:>9.3} {:>9.1} {:>9.1} {:>9.4} {:>10.2} {:>10.2} {:>6}",
            r.label,
            r.ttft_p99,
            r.effective_tps,
            r.raw_tps,
            r.qos,
            r.total_rebuffer_s,
            r.completion_time_s,
            r.preemptions
        ));
        if has_deltas {
            let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
            table.push_str(&format!(
                " {:>10} {:>10}",
                f(r.ttft_p99_reduction_pct),
                f(r.eff_tps_gain_pct)
            ));
        }
        table.push('\n');
    }
    Summary { rows, csv, table }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"workload": {"kind": "burst", "burst_size": 4}, "policies": ["fcfs"], "seeds": [3]}"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config_str(MINIMAL).unwrap();
        assert_eq!(c.scheduler.schedule_interval, 1.0);
        assert_eq!(c.scheduler.buffer_safety_factor, 2.0);
        assert_eq!((c.eff.tau1_frac, c.eff.tau2_frac), (0.10, 0.20));
        assert_eq!(c.cells().len(), 1);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let text = r#"{"workload": {"kind": "burst", "burst_size": 4}, "scheduler": {"interval": 2.0}}"#;
        match parse_config_str(text) {
            Err(Error::ConfigPath { path, .. }) => assert_eq!(path, "scheduler.interval"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inverted_eff_thresholds_rejected() {
        let text = r#"{"workload": {"kind": "burst", "burst_size": 4}, "eff": {"tau1_frac": 0.3, "tau2_frac": 0.2}}"#;
        match parse_config_str(text) {
            Err(Error::ConfigPath { path, .. }) => assert_eq!(path, "eff"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_matrix_rejected() {
        let text = r#"{"workload": {"kind": "burst", "burst_size": 4}, "seeds": []}"#;
        assert!(matches!(parse_config_str(text), Err(Error::ConfigPath { .. })));
    }

    #[test]
    fn ablations_expand_tokenflow_only() {
        let text = r#"{"workload": {"kind": "burst", "burst_size": 4},
            "policies": ["tokenflow", "fcfs"], "seeds": [1, 2],
            "ablations": [{"name": "full"}, {"name": "no-offload", "offload": false}]}"#;
        let c = parse_config_str(text).unwrap();
        let labels: Vec<String> = c.cells().iter().map(Cell::label).collect();
        assert_eq!(
            labels,
            [
                "tokenflow-full-s1",
                "tokenflow-full-s2",
                "tokenflow-no-offload-s1",
                "tokenflow-no-offload-s2",
                "fcfs-s1",
                "fcfs-s2"
            ]
        );
    }

    #[test]
    fn delta_signs() {
        assert_eq!(reduction_pct(10.0, 4.0), Some(60.0));
        assert_eq!(gain_pct(100.0, 120.0), Some(20.0));
        assert_eq!(reduction_pct(0.0, 1.0), None);
    }
}

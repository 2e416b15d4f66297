use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use tokensim::experiment::{self, ExperimentConfig};
use tokensim::workload::WorkloadConfig;
use tokensim::{Error, Policy};

const EXIT_CONFIG: u8 = 1;
const EXIT_SIMULATION: u8 = 2;

/// Deterministic simulator for buffer-aware LLM token-streaming schedulers.
///
/// Runs a policy × seed (× ablation) matrix from an experiment config or a
/// checked-in preset and writes per-cell reports plus a summary table.
#[derive(Debug, Parser)]
#[command(name = "tokensim", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with_all = ["preset", "golden"])]
    config: Option<PathBuf>,

    /// Run a checked-in preset by name.
    #[arg(long, conflicts_with = "golden")]
    preset: Option<String>,

    /// Run a preset and print its event log as JSON lines for diffing.
    #[arg(long, value_name = "PRESET")]
    golden: Option<String>,

    /// Request trace CSV; replaces the config's workload.
    #[arg(long, conflicts_with = "workload")]
    trace: Option<PathBuf>,

    /// Workload config (JSON); replaces the config's workload.
    #[arg(long)]
    workload: Option<PathBuf>,

    /// Policies to run; repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    policy: Vec<Policy>,

    /// Seeds to run; repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,

    /// Also write each cell's event log.
    #[arg(long)]
    emit_events: bool,

    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,

    /// List the available presets and exit.
    #[arg(long)]
    list_presets: bool,
}

fn load_workload(path: &PathBuf) -> tokensim::Result<WorkloadConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut wl: WorkloadConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::ConfigPath {
        path: format!("workload.{}", e.path()),
        message: e.into_inner().to_string(),
    })?;
    if let (Some(p), Some(dir)) = (wl.path.as_mut(), path.parent()) {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    }
    Ok(wl)
}

fn build_config(cli: &Cli) -> tokensim::Result<ExperimentConfig> {
    let mut cfg = if let Some(path) = &cli.config {
        experiment::parse_config(path)?
    } else if let Some(name) = cli.preset.as_ref().or(cli.golden.as_ref()) {
        experiment::load_preset(name)?
    } else {
        let workload = match (&cli.trace, &cli.workload) {
            (Some(t), _) => WorkloadConfig::file(t),
            (None, Some(w)) => load_workload(w)?,
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "one of --config, --preset, --golden, --trace or --workload is required".into(),
                ))
            }
        };
        experiment::parse_config_str(&serde_json::json!({ "workload": workload }).to_string())?
    };
    if cli.config.is_some() || cli.preset.is_some() || cli.golden.is_some() {
        if let Some(t) = &cli.trace {
            cfg.workload = WorkloadConfig::file(t);
            cfg.base_dir = None;
        } else if let Some(w) = &cli.workload {
            cfg.workload = load_workload(w)?;
            cfg.base_dir = None;
        }
    }
    if !cli.policy.is_empty() {
        cfg.policies = cli.policy.clone();
    }
    if !cli.seed.is_empty() {
        cfg.seeds = cli.seed.clone();
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.emit_events |= cli.emit_events || cli.golden.is_some();
    cfg.validate()?;
    Ok(cfg)
}

/// Prints the first cell's event log to stdout.
fn golden(cfg: &ExperimentConfig) -> ExitCode {
    let cells = cfg.cells();
    let cell = &cells[0];
    match experiment::run_cell(cfg, cell) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(out.result.event_log_jsonl().as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_SIMULATION)
                }
                _ => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {}: {e}", cell.label());
            ExitCode::from(EXIT_SIMULATION)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.list_presets {
        for name in experiment::preset_names() {
            println!("{name}");
        }
        return ExitCode::SUCCESS;
    }
    let mut cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if cli.golden.is_some() && cli.out.is_none() {
        cfg.sim.record_events = true;
        return golden(&cfg);
    }
    let outcome = match experiment::run_experiment(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if !outcome.reports.is_empty() {
        let _ = std::io::stdout().write_all(outcome.summary.table.as_bytes());
    }
    eprintln!(
        "{} cell(s) written to {}",
        outcome.reports.len(),
        outcome.output_dir.display()
    );
    if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        for f in &outcome.failures {
            eprintln!("failed: {}: {}", f.cell.label(), f.error);
        }
        ExitCode::from(EXIT_SIMULATION)
    }
}

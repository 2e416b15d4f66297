use std::fs;
use std::path::Path;

use tokensim::experiment::{self, gain_pct, parse_config_str, reduction_pct, run_experiment, ExperimentConfig};
use tokensim::workload::WorkloadKind;
use tokensim::Policy;

fn small(dir: &Path, policies: &str, seeds: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
            "name": "small",
            "workload": {{
                "kind": "burst", "burst_size": 12,
                "prompt_len_dist": {{ "mean": 128, "stddev": 32 }},
                "output_len_dist": {{ "mean": 200, "stddev": 50 }},
                "rate_profile": [{{ "rate": 15, "weight": 0.5 }}, {{ "rate": 25, "weight": 0.5 }}]
            }},
            "sim": {{ "gpu_mem_tokens": 1500, "max_batch": 4 }},
            "scheduler": {{ "per_request_mem_estimate": 96 }},
            "policies": {policies},
            "seeds": {seeds}
        }}"#
    );
    let mut cfg = parse_config_str(&text).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn json_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();
    names
}

#[test]
fn minimal_config_fills_defaults() {
    let cfg = parse_config_str(r#"{ "workload": { "kind": "burst", "burst_size": 4 }, "seeds": [3] }"#).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.scheduler.schedule_interval, 1.0);
    assert_eq!(cfg.scheduler.buffer_safety_factor, 2.0);
    assert_eq!((cfg.eff.tau1_frac, cfg.eff.tau2_frac), (0.10, 0.20));
    assert_eq!(cfg.policies, vec![Policy::Tokenflow]);
}

#[test]
fn inverted_thresholds_are_rejected() {
    let err = parse_config_str(
        r#"{ "workload": { "kind": "burst", "burst_size": 4 }, "eff": { "tau1_frac": 0.3, "tau2_frac": 0.2 } }"#,
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("eff"), "{err}");
}

#[test]
fn unknown_keys_report_their_path() {
    let err = parse_config_str(r#"{ "workload": { "kind": "burst", "burst_size": 4 }, "scheduler": { "intervall": 1 } }"#)
        .unwrap_err()
        .to_string();
    assert!(err.contains("scheduler"), "{err}");
}

#[test]
fn presets_parse_and_validate() {
    let names = experiment::preset_names();
    assert!(names.len() >= 7, "{names:?}");
    for name in &names {
        experiment::load_preset(name).unwrap().validate().unwrap();
    }
    let b = experiment::load_preset("burst-4090b").unwrap();
    assert_eq!(b.workload.kind, WorkloadKind::Burst);
    assert_eq!(b.workload.burst_size, Some(80));
    assert_eq!(b.workload.prompt_len_dist.mean, 1024.0);
    assert_eq!(b.workload.output_len_dist.mean, 2048.0);
}

#[test]
fn policy_seed_matrix_writes_one_report_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), r#"["tokenflow", "fcfs", "chunked", "qoe"]"#, "[1, 2, 3]");
    let out = run_experiment(&cfg).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert_eq!(out.reports.len(), 12);
    assert_eq!(json_files(dir.path()).len(), 12);
    assert!(dir.path().join("summary.csv").exists());
    assert_eq!(out.summary.rows.len(), 12);

    for row in &out.summary.rows {
        let base = out
            .reports
            .iter()
            .find(|r| r.cell.policy == Policy::Fcfs && r.cell.seed == row.seed)
            .unwrap();
        if row.policy == "fcfs" {
            assert_eq!(row.ttft_p99_reduction_pct, None);
            continue;
        }
        assert_eq!(row.ttft_p99_reduction_pct, reduction_pct(base.metrics.ttft_p99, row.ttft_p99));
        assert_eq!(row.eff_tps_gain_pct, gain_pct(base.metrics.effective_tps, row.effective_tps));
    }
}

#[test]
fn reports_are_byte_identical_across_reruns() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&small(a.path(), r#"["tokenflow", "fcfs"]"#, "[5]")).unwrap();
    run_experiment(&small(b.path(), r#"["tokenflow", "fcfs"]"#, "[5]")).unwrap();
    let names = json_files(a.path());
    assert_eq!(names, json_files(b.path()));
    for name in names.iter().map(String::as_str).chain(["summary.csv"]) {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn single_cell_has_no_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&small(dir.path(), r#"["tokenflow"]"#, "[0]")).unwrap();
    assert_eq!(out.summary.rows.len(), 1);
    assert_eq!(out.summary.rows[0].ttft_p99_reduction_pct, None);
    assert_eq!(out.summary.rows[0].eff_tps_gain_pct, None);
}

#[test]
fn ablations_expand_tokenflow_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), r#"["tokenflow", "fcfs"]"#, "[0]");
    cfg.ablations = experiment::load_preset("ablation-burst").unwrap().ablations;
    let cells = cfg.cells();
    assert_eq!(cells.len(), cfg.ablations.len() + 1);
    assert!(cells.iter().filter(|c| c.policy == Policy::Fcfs).all(|c| c.ablation.is_none()));
}

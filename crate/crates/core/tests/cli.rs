use std::fs;
use std::process::{Command, Output};

fn tokensim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokensim"))
        .args(args)
        .output()
        .expect("spawn tokensim")
}

#[test]
fn lists_presets() {
    let out = tokensim(&["--list-presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "swap-timeline"), "{text}");
}

#[test]
fn golden_output_is_stable() {
    let a = tokensim(&["--golden", "swap-timeline"]);
    let b = tokensim(&["--golden", "swap-timeline"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
    for line in String::from_utf8(a.stdout).unwrap().lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn preset_run_writes_reports_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = tokensim(&[
        "--preset",
        "fallback",
        "--policy",
        "tokenflow,fcfs",
        "--emit-events",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["tokenflow-s0.json", "fcfs-s0.json", "tokenflow-s0.events.jsonl", "summary.csv"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("tokenflow") && table.contains("fcfs"), "{table}");
}

#[test]
fn trace_file_runs_without_config() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    fs::write(&trace, "id,arrival_s,prompt_tokens,output_tokens,rate_tps\n0,0.0,64,40,20\n1,0.5,64,40,25\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = tokensim(&[
        "--trace",
        trace.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("tokenflow-s0.json").exists());
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(
        &cfg,
        r#"{ "workload": { "kind": "burst", "burst_size": 2 }, "eff": { "tau1_frac": 0.5, "tau2_frac": 0.2 } }"#,
    )
    .unwrap();
    let out = tokensim(&["--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eff"));
}

#[test]
fn missing_input_exits_1() {
    assert_eq!(tokensim(&[]).status.code(), Some(1));
}

#[test]
fn infeasible_request_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("big.csv");
    fs::write(&trace, "id,arrival_s,prompt_tokens,output_tokens,rate_tps\n0,0.0,60000,10000,20\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = tokensim(&[
        "--trace",
        trace.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out_dir.join("failures.json").exists());
}

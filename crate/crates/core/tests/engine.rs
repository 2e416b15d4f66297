use tokensim::workload::RateProfile;
use tokensim::{run, CostModel, Policy, RequestSpec, SchedulerConfig, SimConfig, Trace, WorkloadConfig};

fn single(output_len: u32) -> Trace {
    Trace {
        requests: vec![RequestSpec {
            id: 0,
            arrival_time: 0.5,
            prompt_len: 256,
            output_len,
            consume_rate: 20.0,
        }],
        seed: None,
    }
}

fn cost() -> CostModel {
    CostModel {
        prefill_per_token: 1e-4,
        decode_base: 0.02,
        decode_per_request: 0.005,
        decode_per_ctx_token: 0.0,
        ..Default::default()
    }
}

#[test]
fn lone_fcfs_request_has_closed_form_timeline() {
    let cm = cost();
    let sim = SimConfig { cost_model: cm, ..Default::default() };
    let res = run(&single(50), Policy::Fcfs, &SchedulerConfig::default(), &sim).unwrap();
    let r = &res.records[0];
    let prefill = cm.prefill_time(256);
    let period = cm.decode_iteration_time(1, 0);
    assert!((r.ttft().unwrap() - prefill).abs() < 1e-9);
    assert_eq!(r.rebuffer, 0.0);
    for (k, &g) in r.gen_times.iter().enumerate() {
        let want = 0.5 + prefill + k as f64 * period;
        assert!((g - want).abs() < 1e-9, "token {k}: {g} vs {want}");
    }
}

#[test]
fn lone_request_timeline_is_policy_independent() {
    let sim = SimConfig { cost_model: cost(), ..Default::default() };
    let trace = single(80);
    let base = run(&trace, Policy::Fcfs, &SchedulerConfig::default(), &sim).unwrap();
    for policy in Policy::ALL {
        let res = run(&trace, policy, &SchedulerConfig::default(), &sim).unwrap();
        let (a, b) = (&base.records[0], &res.records[0]);
        assert_eq!(a.gen_times.len(), b.gen_times.len(), "{policy:?}");
        for (x, y) in a.gen_times.iter().zip(&b.gen_times) {
            assert!((x - y).abs() < 1e-9, "{policy:?}: {x} vs {y}");
        }
        assert_eq!(b.rebuffer, 0.0);
    }
}

#[test]
fn repeated_runs_produce_identical_event_logs() {
    let wl = WorkloadConfig::poisson(3.0, 8.0, 128.0, 256.0, RateProfile::new(&[(15.0, 0.5), (30.0, 0.5)]));
    let trace = wl.build(7, None).unwrap();
    let sim = SimConfig {
        gpu_mem_tokens: 2048,
        max_batch: 6,
        cost_model: cost(),
        ..Default::default()
    };
    for policy in Policy::ALL {
        let first = run(&trace, policy, &SchedulerConfig::default(), &sim).unwrap().event_log_jsonl();
        assert!(!first.is_empty());
        for _ in 0..9 {
            let again = run(&trace, policy, &SchedulerConfig::default(), &sim).unwrap().event_log_jsonl();
            assert_eq!(first, again, "{policy:?}");
        }
    }
}

#[test]
fn oversized_request_is_rejected_up_front() {
    let sim = SimConfig {
        gpu_mem_tokens: 200,
        ..Default::default()
    };
    let err = run(&single(50), Policy::Tokenflow, &SchedulerConfig::default(), &sim).unwrap_err();
    assert!(matches!(err, tokensim::Error::CapacityInfeasible { id: 0, .. }), "{err}");
}

#[test]
fn empty_trace_finishes_immediately() {
    let res = run(
        &Trace { requests: vec![], seed: None },
        Policy::Tokenflow,
        &SchedulerConfig::default(),
        &SimConfig::default(),
    )
    .unwrap();
    assert!(res.records.is_empty());
    assert!(res.violations.is_empty());
}

mod random_traces {
    use super::*;
    use proptest::prelude::*;
    use tokensim::engine::KvOptions;

    fn trace_strategy() -> impl Strategy<Value = Trace> {
        prop::collection::vec((0.0..6.0f64, 16..200u32, 8..160u32, 10.0..40.0f64), 1..10).prop_map(|rows| {
            let mut rows = rows;
            rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            Trace {
                requests: rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (t, p, o, r))| RequestSpec {
                        id: i as u32,
                        arrival_time: t,
                        prompt_len: p,
                        output_len: o,
                        consume_rate: r,
                    })
                    .collect(),
                seed: None,
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn every_request_completes_without_violations(
            trace in trace_strategy(),
            mem in 400u64..1500,
            batch in 1usize..6,
            policy in prop::sample::select(Policy::ALL.to_vec()),
            wt in any::<bool>(),
            overlap in any::<bool>(),
            offload in any::<bool>(),
        ) {
            let sim = SimConfig {
                gpu_mem_tokens: mem,
                max_batch: batch,
                cost_model: cost(),
                kv: KvOptions { write_through: wt, overlap, offload },
                ..Default::default()
            };
            let sched = SchedulerConfig { per_request_mem_estimate: 96, ..Default::default() };
            let res = run(&trace, policy, &sched, &sim).unwrap();
            prop_assert!(res.violations.is_empty(), "{:?}", res.violations);
            for r in &res.records {
                prop_assert!(r.is_complete());
                prop_assert_eq!(r.consume_times.len(), r.output_len as usize);
            }
        }
    }
}

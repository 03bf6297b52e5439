//! End-to-end event-loop runs: failure-free oracle equality, single and
//! multiple kills, abort contracts, and determinism.

use nfjsim_core::{
    parse_program, run_simulation, AbortReason, FailurePlan, RunResult, SimConfig,
};

fn cfg() -> SimConfig {
    SimConfig::default()
}

#[test]
fn single_worker_matches_sequential_oracle() {
    let (program, args) = parse_program("fib:10").unwrap();
    let report = run_simulation(&program, &args, 1, &FailurePlan::none(), 1, &cfg()).unwrap();
    assert_eq!(report.result, RunResult::Value(55));
    assert_eq!(report.metrics.re_executions, 0);
    assert_eq!(report.metrics.logical_tasks, 177);
}

#[test]
fn single_worker_execution_order_is_depth_first() {
    let (program, args) = parse_program("fib:6").unwrap();
    let seq = nfjsim_core::sequential_execute(&program, &args, 100_000).unwrap();
    let mut c = cfg();
    c.collect_trace = true;
    let report = run_simulation(&program, &args, 1, &FailurePlan::none(), 3, &c).unwrap();
    let order: Vec<Vec<u32>> = report
        .trace
        .unwrap()
        .iter()
        .filter(|e| e.kind == "task_done")
        .map(|e| {
            e.detail["path"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_u64().unwrap() as u32)
                .collect()
        })
        .collect();
    assert_eq!(order, seq.completion_order);
}

#[test]
fn multi_worker_failure_free_runs_match_oracle() {
    for spec in ["fib:10", "tree:2,4", "tree:3,3,2"] {
        let (program, args) = parse_program(spec).unwrap();
        let oracle = nfjsim_core::sequential_execute(&program, &args, 1_000_000).unwrap();
        for p in [2, 4, 8] {
            for seed in [7, 42] {
                let report =
                    run_simulation(&program, &args, p, &FailurePlan::none(), seed, &cfg()).unwrap();
                assert_eq!(
                    report.result,
                    RunResult::Value(oracle.value),
                    "{spec} p={p} seed={seed}"
                );
                assert_eq!(report.metrics.re_executions, 0, "{spec} p={p} seed={seed}");
                assert_eq!(report.p_final, p);
            }
        }
    }
}

#[test]
fn work_first_pool_shape_holds_failure_free() {
    let (program, args) = parse_program("fib:9").unwrap();
    let mut c = cfg();
    c.shape_checks = true;
    for p in [2, 4] {
        let report = run_simulation(&program, &args, p, &FailurePlan::none(), 11, &c).unwrap();
        assert!(report.ok(), "pool shape violated: {:?}", report.result);
    }
}

#[test]
fn single_kill_recovers_and_matches_oracle() {
    let (program, args) = parse_program("fib:10").unwrap();
    let plan = FailurePlan::kill_at_own_event(1, 10);
    let report = run_simulation(&program, &args, 4, &plan, 7, &cfg()).unwrap();
    assert_eq!(report.result, RunResult::Value(55));
    assert_eq!(report.p_final, 3);
    assert_eq!(report.metrics.recovery_count, 1);
}

#[test]
fn kill_every_worker_aborts() {
    let (program, args) = parse_program("fib:10").unwrap();
    let plan = FailurePlan::kill_at_step(vec![0, 1], 50);
    let report = run_simulation(&program, &args, 2, &plan, 7, &cfg()).unwrap();
    assert_eq!(report.result, RunResult::Aborted(AbortReason::AllWorkersFailed));
}

#[test]
fn store_failure_aborts() {
    let (program, args) = parse_program("fib:10").unwrap();
    let plan = FailurePlan { entries: vec![], store_fail_at: Some(40) };
    let report = run_simulation(&program, &args, 4, &plan, 7, &cfg()).unwrap();
    assert_eq!(report.result, RunResult::Aborted(AbortReason::StoreFailed));
}

#[test]
fn identical_inputs_give_byte_identical_traces() {
    let (program, args) = parse_program("fib:8").unwrap();
    let mut c = cfg();
    c.collect_trace = true;
    let plan = FailurePlan::kill_at_own_event(2, 5);
    let a = run_simulation(&program, &args, 4, &plan, 99, &c).unwrap();
    let b = run_simulation(&program, &args, 4, &plan, 99, &c).unwrap();
    let ja = nfjsim_core::trace::to_jsonl(a.trace.as_ref().unwrap());
    let jb = nfjsim_core::trace::to_jsonl(b.trace.as_ref().unwrap());
    assert_eq!(ja, jb);
    assert_eq!(a.per_worker_events, b.per_worker_events);
}

#[test]
fn simultaneous_kills_recover() {
    let (program, args) = parse_program("fib:10").unwrap();
    let plan = FailurePlan::kill_at_step(vec![1, 2], 60);
    let mut c = cfg();
    c.audit_every_event = true;
    let report = run_simulation(&program, &args, 4, &plan, 7, &c).unwrap();
    assert_eq!(report.result, RunResult::Value(55), "metrics: {:?}", report.metrics);
    assert_eq!(report.p_final, 2);
}

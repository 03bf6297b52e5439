use nfjsim_core::*;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

fn main() {
    let cfg = SimConfig::default();
    let (program, args) = parse_program("tree:3,4").unwrap();
    let p = 7;
    let reference = run_simulation(&program, &args, p, &FailurePlan::none(), 5, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    for i in 0..500 {
        let plan = random_failure_plan(&mut rng, p, &reference.per_worker_events);
        if 31000 + i != 31208 { continue; }
        let mut c = cfg.clone();
        c.collect_trace = true;
        let report = run_simulation(&program, &args, p, &plan, 31208, &c).unwrap();
        match &report.result {
            RunResult::Aborted(AbortReason::StepBudgetExceeded { diagnostics }) => {
                eprintln!("{}", diagnostics.lines().filter(|l| l.contains("alive=true") || l.starts_with("transit") || l.starts_with("root")).collect::<Vec<_>>().join("\n"));
            }
            other => eprintln!("{other:?}"),
        }
        let trace = report.trace.unwrap();
        for (j, e) in trace.iter().enumerate() {
            let s = serde_json::to_string(e).unwrap();
            if s.contains("w1#15") || s.contains("w3#5") || ["kill","retarget","buffer_return","stale_drop","recover"].contains(&e.kind.as_str()) {
                eprintln!("{j:5} {s}");
            }
        }
        break;
    }
}

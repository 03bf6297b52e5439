//! Seeded discrete-event simulation: event queue, delayed FIFO network,
//! fault injector, auditing hooks, metrics, and the sweep/fuzz drivers.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::{audit_conservation, check_workfirst_shape};
use crate::cluster::{Cluster, Effects, Metrics, SimConfig};
use crate::error::{AbortReason, ProgramError};
use crate::program::{sequential_execute, ProgramSpec, TaskPath};
use crate::trace::{TraceEvent, RECOVERY_KINDS};
use crate::worker::{Message, WorkerId};

/// When a planned failure strikes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trigger {
    /// At the first event whose global step reaches this value.
    AtStep(u64),
    /// Right before the worker executes its k-th event (1-based).
    AtOwnEvent { worker: WorkerId, index: u64 },
    /// Right after some worker claims this worker's checkpoint for recovery.
    DuringRecoveryOf(WorkerId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VictimSpec {
    Workers(Vec<WorkerId>),
    /// The worker that performed the claim (only for `DuringRecoveryOf`).
    Claimant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub trigger: Trigger,
    pub victims: VictimSpec,
}

/// A schedule of fail-stop events plus an optional store failure.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailurePlan {
    pub entries: Vec<PlanEntry>,
    pub store_fail_at: Option<u64>,
}

impl FailurePlan {
    pub fn none() -> Self {
        FailurePlan::default()
    }

    pub fn kill_at_own_event(worker: WorkerId, index: u64) -> Self {
        FailurePlan {
            entries: vec![PlanEntry {
                trigger: Trigger::AtOwnEvent { worker, index },
                victims: VictimSpec::Workers(vec![worker]),
            }],
            store_fail_at: None,
        }
    }

    pub fn kill_at_step(victims: Vec<WorkerId>, step: u64) -> Self {
        FailurePlan {
            entries: vec![PlanEntry {
                trigger: Trigger::AtStep(step),
                victims: VictimSpec::Workers(victims),
            }],
            store_fail_at: None,
        }
    }

    pub fn summary(&self) -> String {
        let mut parts: Vec<String> = self
            .entries
            .iter()
            .map(|e| {
                let victims = match &e.victims {
                    VictimSpec::Workers(ws) => ws
                        .iter()
                        .map(|w| w.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                    VictimSpec::Claimant => "buddy".to_string(),
                };
                match &e.trigger {
                    Trigger::AtStep(n) => format!("{victims}@s{n}"),
                    Trigger::AtOwnEvent { worker, index } => format!("{victims}@e{index}(w{worker})"),
                    Trigger::DuringRecoveryOf(w) => format!("{victims}@recovery({w})"),
                }
            })
            .collect();
        if let Some(n) = self.store_fail_at {
            parts.push(format!("store@s{n}"));
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join(";")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunResult {
    Value(i64),
    Aborted(AbortReason),
}

impl RunResult {
    pub fn value(&self) -> Option<i64> {
        match self {
            RunResult::Value(v) => Some(*v),
            RunResult::Aborted(_) => None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub program: String,
    pub root_args: Vec<i64>,
    pub seed: u64,
    pub result: RunResult,
    pub oracle: i64,
    pub p_initial: usize,
    pub p_final: usize,
    pub metrics: Metrics,
    pub per_worker_events: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceEvent>>,
    #[serde(skip)]
    pub store_ops: Vec<crate::store::StoreOpRecord>,
}

impl SimReport {
    pub fn ok(&self) -> bool {
        self.result == RunResult::Value(self.oracle)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    Tick(WorkerId),
    Deliver { from: Option<WorkerId>, to: WorkerId, msg: Message },
}

impl Event {
    fn owner(&self) -> WorkerId {
        match self {
            Event::Tick(w) => *w,
            Event::Deliver { to, .. } => *to,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Event::Deliver { .. } => 1,
            Event::Tick(_) => 2,
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
struct Queued {
    step: u64,
    rank: u8,
    worker: WorkerId,
    seq: u64,
    event: Event,
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.step, self.rank, self.worker, self.seq).cmp(&(
            other.step,
            other.rank,
            other.worker,
            other.seq,
        ))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

struct Network {
    rngs: Vec<ChaCha8Rng>,
    max_delay: u64,
    pair_last: BTreeMap<(WorkerId, WorkerId), u64>,
}

impl Network {
    fn delivery_step(&mut self, from: WorkerId, to: WorkerId, now: u64) -> u64 {
        let d = self.rngs[from].gen_range(1..=self.max_delay.max(1));
        let at = (now + d).max(*self.pair_last.get(&(from, to)).unwrap_or(&0));
        self.pair_last.insert((from, to), at);
        at
    }
}

struct Driver {
    cluster: Cluster,
    heap: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    net: Network,
    injector_rng: ChaCha8Rng,
    pending_tick: Vec<bool>,
    own_events: Vec<u64>,
    entries: Vec<(PlanEntry, bool)>,
    store_fail_at: Option<u64>,
    store_fail_applied: bool,
    max_notice_delay: u64,
    audit_every_event: bool,
    shape_checks: bool,
}

impl Driver {
    fn push(&mut self, step: u64, event: Event) {
        self.seq += 1;
        let q = Queued { step, rank: event.rank(), worker: event.owner(), seq: self.seq, event };
        self.heap.push(Reverse(q));
    }

    fn schedule_tick(&mut self, w: WorkerId, at: u64) {
        if !self.pending_tick[w] {
            self.pending_tick[w] = true;
            self.push(at, Event::Tick(w));
        }
    }

    fn apply_effects(&mut self, w: WorkerId, eff: Effects, now: u64) {
        for env in eff.sends {
            self.cluster.metrics.messages_sent += 1;
            let at = self.net.delivery_step(env.from, env.to, now);
            self.push(at, Event::Deliver { from: Some(env.from), to: env.to, msg: env.msg });
        }
        if let Some(cost) = eff.wants_tick {
            self.schedule_tick(w, now + cost);
        }
    }

    /// Fail-stop kill: marks victims dead and schedules delayed failure
    /// notices to every survivor.
    fn kill(&mut self, victims: &[WorkerId], now: u64) {
        let victims: Vec<WorkerId> =
            victims.iter().copied().filter(|v| self.cluster.is_alive(*v)).collect();
        if victims.is_empty() {
            return;
        }
        self.cluster.kill(&victims);
        for to in self.cluster.alive_workers() {
            let d = self.injector_rng.gen_range(0..=self.max_notice_delay);
            self.push(
                now + d,
                Event::Deliver { from: None, to, msg: Message::FailureNotice { failed: victims.clone() } },
            );
        }
    }

    fn resolve_victims(entry: &PlanEntry, claimant: Option<WorkerId>) -> Vec<WorkerId> {
        match &entry.victims {
            VictimSpec::Workers(ws) => ws.clone(),
            VictimSpec::Claimant => claimant.into_iter().collect(),
        }
    }
}

/// Drives all worker state machines to quiescence or abort under the given
/// failure plan. Identical inputs produce identical reports, trace included.
pub fn run_simulation(
    program: &ProgramSpec,
    root_args: &[i64],
    p: usize,
    plan: &FailurePlan,
    seed: u64,
    cfg: &SimConfig,
) -> Result<SimReport, ProgramError> {
    let oracle_budget = 200_000_000;
    let oracle = sequential_execute(program, root_args, oracle_budget)?;
    let budget = cfg.step_budget_factor.max(1).saturating_mul(oracle.tasks.max(1)).max(10_000);

    let cluster = Cluster::new(program.clone(), root_args, p, cfg.clone(), seed)
        .expect("fresh store cannot fail");
    let net = Network {
        rngs: (0..p)
            .map(|w| ChaCha8Rng::seed_from_u64(seed ^ (0x00E7_0000u64 + w as u64).wrapping_mul(0x9E37_79B9)))
            .collect(),
        max_delay: cfg.max_net_delay,
        pair_last: BTreeMap::new(),
    };
    let mut driver = Driver {
        cluster,
        heap: BinaryHeap::new(),
        seq: 0,
        net,
        injector_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x1213_1415_1617_1819),
        pending_tick: vec![false; p],
        own_events: vec![0; p],
        entries: plan.entries.iter().map(|e| (e.clone(), false)).collect(),
        store_fail_at: plan.store_fail_at,
        store_fail_applied: false,
        max_notice_delay: cfg.max_notice_delay,
        audit_every_event: cfg.audit_every_event,
        shape_checks: cfg.shape_checks,
    };
    for w in 0..p {
        driver.schedule_tick(w, 1);
    }

    let mut abort: Option<AbortReason> = None;
    let mut final_value: Option<i64> = None;

    'main: loop {
        let Some(Reverse(q)) = driver.heap.pop() else {
            // Quiescent. Without a root result this is a deadlock.
            if driver.cluster.root_result.is_none() && abort.is_none() {
                abort = Some(AbortReason::StepBudgetExceeded {
                    diagnostics: format!(
                        "quiescent without result\n{}",
                        driver.cluster.diagnostics()
                    ),
                });
            }
            break;
        };
        let now = q.step;
        if now > budget {
            abort = Some(AbortReason::StepBudgetExceeded {
                diagnostics: format!("budget {budget} exceeded\n{}", driver.cluster.diagnostics()),
            });
            break;
        }
        driver.cluster.set_step(now);

        // Injector: store failure and step-triggered kills fire before any
        // event at or beyond their step executes.
        if let Some(at) = driver.store_fail_at {
            if now >= at && !driver.store_fail_applied {
                driver.store_fail_applied = true;
                driver.cluster.fail_store();
            }
        }
        for i in 0..driver.entries.len() {
            if driver.entries[i].1 {
                continue;
            }
            let fire = match driver.entries[i].0.trigger {
                Trigger::AtStep(n) => now >= n,
                Trigger::AtOwnEvent { worker, index } => {
                    q.event.owner() == worker
                        && driver.cluster.is_alive(worker)
                        && driver.own_events[worker] + 1 == index
                }
                Trigger::DuringRecoveryOf(_) => false,
            };
            if fire {
                driver.entries[i].1 = true;
                let victims = Driver::resolve_victims(&driver.entries[i].0, None);
                driver.kill(&victims, now);
            }
        }
        if driver.cluster.alive_count() == 0 {
            abort = Some(AbortReason::AllWorkersFailed);
            break;
        }

        let owner = q.event.owner();
        let eff = match q.event {
            Event::Tick(w) => {
                driver.pending_tick[w] = false;
                if !driver.cluster.is_alive(w) {
                    continue;
                }
                driver.own_events[w] += 1;
                driver.cluster.tick(w)
            }
            Event::Deliver { from, to, msg } => {
                if !driver.cluster.is_alive(to) {
                    driver.cluster.metrics.dropped_messages += 1;
                    driver.cluster.trace.push(
                        "drop",
                        Some(to),
                        serde_json::json!({"msg": msg.kind()}),
                    );
                    continue;
                }
                driver.own_events[to] += 1;
                driver.cluster.deliver(to, from, msg)
            }
        };
        driver.apply_effects(owner, eff, now);

        // During-recovery triggers watch claims performed by this event.
        let claims = driver.cluster.claims_last_event.clone();
        for (failed, claimant) in claims {
            for i in 0..driver.entries.len() {
                if driver.entries[i].1 {
                    continue;
                }
                if let Trigger::DuringRecoveryOf(x) = driver.entries[i].0.trigger {
                    if x == failed {
                        driver.entries[i].1 = true;
                        let victims =
                            Driver::resolve_victims(&driver.entries[i].0, Some(claimant));
                        driver.kill(&victims, now);
                    }
                }
            }
        }
        if driver.cluster.alive_count() == 0 {
            abort = Some(AbortReason::AllWorkersFailed);
            break;
        }

        if let Some(reason) = driver.cluster.abort_reason() {
            abort = Some(reason.clone());
            break;
        }
        if let Some(v) = driver.cluster.root_result {
            final_value = Some(v);
            break;
        }

        if driver.audit_every_event {
            let violations = audit_conservation(&driver.cluster);
            if !violations.is_empty() {
                abort = Some(AbortReason::AuditViolation {
                    detail: violations
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join("; "),
                });
                break 'main;
            }
        }
        if driver.shape_checks && !driver.cluster.had_failures() {
            let violations = check_workfirst_shape(&driver.cluster);
            if !violations.is_empty() {
                abort = Some(AbortReason::AuditViolation {
                    detail: violations[0].to_string(),
                });
                break 'main;
            }
        }
    }

    let cluster = driver.cluster;
    let mut metrics = cluster.metrics.clone();
    metrics.logical_tasks = cluster.completions().len() as u64;
    metrics.task_executions = cluster.completions().values().map(|c| *c as u64).sum();
    metrics.re_executions = metrics.task_executions - metrics.logical_tasks;
    metrics.store_ops = cluster.store.ops_performed;

    // Failure-free runs must incorporate every (parent, slot) exactly once.
    if abort.is_none() && !cluster.had_failures() {
        if let Some(((fid, slot), n)) =
            cluster.slot_writes().iter().find(|(_, n)| **n > 1)
        {
            abort = Some(AbortReason::ProtocolViolation {
                detail: format!("slot ({fid}, {slot}) written {n} times in failure-free run"),
            });
        }
    }

    let result = match (abort, final_value) {
        (Some(reason), _) => RunResult::Aborted(reason),
        (None, Some(v)) => RunResult::Value(v),
        (None, None) => RunResult::Aborted(AbortReason::StepBudgetExceeded {
            diagnostics: "no result".into(),
        }),
    };

    Ok(SimReport {
        program: program.id.clone(),
        root_args: root_args.to_vec(),
        seed,
        result,
        oracle: oracle.value,
        p_initial: p,
        p_final: cluster.alive_count(),
        metrics,
        per_worker_events: driver.own_events,
        trace: if cfg.collect_trace { Some(cluster.trace.events) } else { None },
        store_ops: cluster.store.op_log().to_vec(),
    })
}

/// One row of a failure sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub worker: WorkerId,
    pub event_index: u64,
    pub plan: String,
    pub result_ok: bool,
    pub re_executions: u64,
    pub checkpoints_written: u64,
    pub recovery_count: u64,
    pub violation: Option<String>,
}

/// Kills every worker at every one of its event indices (enumerated from a
/// failure-free reference run) and checks each run against the oracle, the
/// re-execution bound, and recovery localization.
pub fn exhaustive_single_failure_sweep(
    program: &ProgramSpec,
    root_args: &[i64],
    p: usize,
    seed: u64,
    cfg: &SimConfig,
) -> Result<Vec<SweepRow>, ProgramError> {
    let mut ref_cfg = cfg.clone();
    ref_cfg.collect_trace = false;
    let reference = run_simulation(program, root_args, p, &FailurePlan::none(), seed, &ref_cfg)?;
    let mut rows = Vec::new();
    for w in 0..p {
        for k in 1..=reference.per_worker_events[w] {
            let plan = FailurePlan::kill_at_own_event(w, k);
            let mut run_cfg = cfg.clone();
            run_cfg.collect_trace = true;
            let report = run_simulation(program, root_args, p, &plan, seed, &run_cfg)?;
            let violation = check_single_failure_run(&report, w, p);
            rows.push(SweepRow {
                worker: w,
                event_index: k,
                plan: plan.summary(),
                result_ok: if p == 1 {
                    report.result == RunResult::Aborted(AbortReason::AllWorkersFailed)
                } else {
                    report.ok()
                },
                re_executions: report.metrics.re_executions,
                checkpoints_written: report.metrics.checkpoints_written,
                recovery_count: report.metrics.recovery_count,
                violation,
            });
        }
    }
    Ok(rows)
}

/// Checks the single-failure invariants on a traced run: the re-executed
/// task set is bounded by the victim's post-checkpoint work plus adopted
/// transit frames, and recovery actions stay localized.
pub fn check_single_failure_run(
    report: &SimReport,
    victim: WorkerId,
    p: usize,
) -> Option<String> {
    if p == 1 {
        return match &report.result {
            RunResult::Aborted(AbortReason::AllWorkersFailed) => None,
            other => Some(format!("expected AllWorkersFailed with p=1, got {other:?}")),
        };
    }
    if !report.ok() {
        return Some(format!("result {:?} != oracle {}", report.result, report.oracle));
    }
    let trace = report.trace.as_ref()?;

    let kill_idx = trace
        .iter()
        .position(|e| e.kind == "kill" && e.worker == Some(victim))
        .unwrap_or(trace.len());
    let last_ckpt_idx = trace[..kill_idx]
        .iter()
        .rposition(|e| e.kind == "ckpt" && e.worker == Some(victim));

    // Tasks the victim completed after its last durable checkpoint.
    let mut allowance: Vec<TaskPath> = Vec::new();
    let start = last_ckpt_idx.map(|i| i + 1).unwrap_or(0);
    for e in &trace[start..kill_idx] {
        if e.kind == "task_done" && e.worker == Some(victim) {
            if let Some(path) = e.detail.get("path").and_then(path_from_json) {
                allowance.push(path);
            }
        }
    }

    // Re-executed tasks: completed more than once anywhere.
    let mut counts: BTreeMap<TaskPath, u32> = BTreeMap::new();
    for e in trace.iter() {
        if e.kind == "task_done" {
            if let Some(path) = e.detail.get("path").and_then(path_from_json) {
                *counts.entry(path).or_insert(0) += 1;
            }
        }
    }
    for (path, n) in counts.iter() {
        if *n > 1 {
            let covered =
                allowance.iter().any(|a| path.len() >= a.len() && &path[..a.len()] == a.as_slice());
            if !covered {
                return Some(format!(
                    "task {path:?} re-executed ({n}x) outside the victim's post-checkpoint set"
                ));
            }
        }
    }

    // Localization: recovery-tagged actions only at claimants, relocation
    // targets, and rerouting senders.
    let claimants: std::collections::BTreeSet<WorkerId> = trace
        .iter()
        .filter(|e| e.kind == "claim" || e.kind == "supersede")
        .filter_map(|e| e.worker)
        .collect();
    let reloc_targets: std::collections::BTreeSet<WorkerId> = trace
        .iter()
        .filter(|e| e.kind == "reloc")
        .filter_map(|e| e.detail.get("to").and_then(|v| v.as_u64()).map(|v| v as WorkerId))
        .collect();
    for e in trace.iter() {
        if !RECOVERY_KINDS.contains(&e.kind.as_str()) {
            continue;
        }
        let Some(w) = e.worker else { continue };
        let allowed = match e.kind.as_str() {
            "retarget" => true, // a sender rerouting a parked record
            "reloc_apply" => reloc_targets.contains(&w),
            _ => claimants.contains(&w),
        };
        if !allowed {
            return Some(format!(
                "recovery event `{}` at non-participant worker {w}",
                e.kind
            ));
        }
    }
    None
}

fn path_from_json(v: &serde_json::Value) -> Option<TaskPath> {
    v.as_array()
        .map(|a| a.iter().filter_map(|x| x.as_u64().map(|u| u as u32)).collect())
}

/// A random failure plan for fuzzing: one to three entries over step,
/// own-event, and during-recovery triggers, killing at most p-1 workers.
pub fn random_failure_plan(
    rng: &mut ChaCha8Rng,
    p: usize,
    reference_events: &[u64],
) -> FailurePlan {
    let total: u64 = reference_events.iter().sum::<u64>().max(4);
    let max_kills = p.saturating_sub(1);
    let mut killed: Vec<WorkerId> = Vec::new();
    let mut entries = Vec::new();
    let n_entries = rng.gen_range(1..=3usize);
    for i in 0..n_entries {
        if killed.len() >= max_kills {
            break;
        }
        let remaining: Vec<WorkerId> = (0..p).filter(|w| !killed.contains(w)).collect();
        let n_victims = rng.gen_range(1..=(max_kills - killed.len()).min(2));
        let mut victims = Vec::new();
        let mut pool = remaining.clone();
        for _ in 0..n_victims {
            if pool.is_empty() {
                break;
            }
            let v = pool.remove(rng.gen_range(0..pool.len()));
            victims.push(v);
        }
        if victims.is_empty() {
            break;
        }
        let trigger = match rng.gen_range(0..4u8) {
            0 => Trigger::AtStep(rng.gen_range(1..=total)),
            1 => {
                let w = victims[0];
                let e = reference_events.get(w).copied().unwrap_or(1).max(1);
                Trigger::AtOwnEvent { worker: w, index: rng.gen_range(1..=e) }
            }
            2 if i > 0 && !killed.is_empty() => {
                Trigger::DuringRecoveryOf(killed[rng.gen_range(0..killed.len())])
            }
            _ => Trigger::AtStep(rng.gen_range(1..=total)),
        };
        let use_claimant =
            matches!(trigger, Trigger::DuringRecoveryOf(_)) && rng.gen_bool(0.5);
        killed.extend(victims.iter().copied());
        entries.push(PlanEntry {
            trigger,
            victims: if use_claimant {
                // The claimant may coincide with an already-dead pick; a
                // claimant kill consumes one victim budget slot regardless.
                VictimSpec::Claimant
            } else {
                VictimSpec::Workers(victims)
            },
        });
    }
    FailurePlan { entries, store_fail_at: None }
}

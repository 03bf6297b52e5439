//! The worker cluster: every protocol step as an atomic event handler.
//!
//! A handler is one indivisible unit of execution — a worker tick (one task
//! section or one recovery stage) or one message delivery. Failures are
//! injected only between handlers, which is the granularity at which
//! checkpoints are declared coherent. Handlers mutate exactly one worker,
//! the store, and the trace, and emit messages for the driver to deliver.
//!
//! The driver can be the seeded event loop in [`crate::sim`] or a test that
//! delivers messages by hand to script an exact schedule.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::{AbortReason, StoreError};
use crate::program::{Action, Frame, FrameId, ParentRef, ProgramSpec, Slot, TaskPath};
use crate::protocol::{buddy_of, timer_due, CheckpointCause, CheckpointOccasion};
use crate::store::{Checkpoint, ClaimOutcome, ResilientStore, TransitKind, TransitRecord};
use crate::trace::Trace;
use crate::worker::{
    HeldFrame, HoldStatus, Message, PendingRelocation, PendingReturn, SavedResult, StealLink,
    WorkerId, WorkerState,
};

/// Simulation knobs shared by the cluster and the event loop.
#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    /// Checkpoint period R in completed tasks; protocol checkpoints ignore it.
    pub checkpoint_period: u32,
    /// Maximum network delay in steps (messages take 1..=max).
    pub max_net_delay: u64,
    /// Maximum failure-notice delay in steps (notices take 0..=max).
    pub max_notice_delay: u64,
    /// Step budget = factor x sequential task count.
    pub step_budget_factor: u64,
    /// Run the conservation audit after every event.
    pub audit_every_event: bool,
    /// Collect the event trace.
    pub collect_trace: bool,
    /// Log every store operation for the optional dump.
    pub log_store_ops: bool,
    /// Extra failure-free structural checks (work-first pool shape).
    pub shape_checks: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            checkpoint_period: 1,
            max_net_delay: 5,
            max_notice_delay: 5,
            step_budget_factor: 1000,
            audit_every_event: false,
            collect_trace: false,
            log_store_ops: false,
            shape_checks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: WorkerId,
    pub to: WorkerId,
    pub msg: Message,
}

/// What a handler asks of its driver.
#[derive(Debug, Default)]
pub struct Effects {
    pub sends: Vec<Envelope>,
    /// The worker wants another tick after this many steps.
    pub wants_tick: Option<u64>,
}

/// Counters reported in the final run report.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Metrics {
    pub logical_tasks: u64,
    pub task_executions: u64,
    pub re_executions: u64,
    pub checkpoints_written: u64,
    pub transit_created: u64,
    pub messages_sent: u64,
    pub dropped_messages: u64,
    pub recovery_count: u64,
    pub relocations: u64,
    pub store_ops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RecoveryStage {
    Claim,
    ReadState,
    ScanTransit,
    Notify,
    Commit,
}

#[derive(Debug, Default)]
struct Staging {
    snapshot: Option<crate::worker::WorkerSnapshot>,
    adopt_transit: Vec<TransitRecord>,
    reroute: Vec<TransitRecord>,
}

#[derive(Debug)]
struct ActiveRecovery {
    failed: WorkerId,
    stage: RecoveryStage,
    staging: Staging,
}

#[derive(Debug, Default)]
struct RecoveryState {
    queue: VecDeque<WorkerId>,
    active: Option<ActiveRecovery>,
    /// Failures known to be fully recovered by someone else.
    settled: BTreeSet<WorkerId>,
}

enum HandlerError {
    Store(StoreError),
    Violation(String),
}

impl From<StoreError> for HandlerError {
    fn from(e: StoreError) -> Self {
        HandlerError::Store(e)
    }
}

type HandlerResult = Result<(), HandlerError>;

pub struct Cluster {
    pub program: ProgramSpec,
    pub store: ResilientStore,
    pub cfg: SimConfig,
    pub trace: Trace,
    pub metrics: Metrics,
    workers: Vec<WorkerState>,
    recoveries: Vec<RecoveryState>,
    alive: Vec<bool>,
    steal_rngs: Vec<ChaCha8Rng>,
    p: usize,
    pub root_result: Option<i64>,
    abort: Option<AbortReason>,
    /// Completion counts per logical task path.
    completions: BTreeMap<TaskPath, u32>,
    /// Writes per (parent frame, slot); duplicates are failure-free bugs.
    slot_writes: BTreeMap<(FrameId, usize), u32>,
    /// Claims performed by the last handler, for during-recovery triggers.
    pub claims_last_event: Vec<(WorkerId, WorkerId)>,
    any_failure_injected: bool,
    /// Sends staged by nested protocol steps within one handler.
    staged_sends: Vec<Envelope>,
    now: u64,
}

impl Cluster {
    pub fn new(
        program: ProgramSpec,
        root_args: &[i64],
        p: usize,
        cfg: SimConfig,
        seed: u64,
    ) -> Result<Self, AbortReason> {
        assert!(p >= 1, "need at least one worker");
        let mut workers: Vec<WorkerState> = (0..p).map(WorkerState::new).collect();
        let steal_rngs = (0..p)
            .map(|w| ChaCha8Rng::seed_from_u64(seed ^ (0x5331_7EA1u64.wrapping_mul(w as u64 + 1))))
            .collect();
        let mut store = ResilientStore::new(cfg.log_store_ops);
        let trace = Trace::new(cfg.collect_trace);

        // Root task starts at worker 0; its seq-0 checkpoint carries the
        // root as next task so a failure before the first write loses nothing.
        let root_id = workers[0].mint_frame_id();
        workers[0].current = Some(Frame::root(&program.id, root_args.to_vec(), root_id));
        workers[0].current_fresh = true;

        for w in 0..p {
            let include_next = w == 0;
            let occasion = if include_next {
                CheckpointOccasion::BeforeBranch
            } else {
                CheckpointOccasion::AfterFinish
            };
            let cp = Checkpoint {
                worker: w,
                seq: 0,
                occasion,
                state: workers[w].snapshot(include_next),
            };
            store.put_checkpoint(cp).map_err(|_| AbortReason::StoreFailed)?;
        }
        store.ops_this_handler = 0;

        Ok(Cluster {
            program,
            store,
            cfg,
            trace,
            metrics: Metrics::default(),
            workers,
            recoveries: (0..p).map(|_| RecoveryState::default()).collect(),
            alive: vec![true; p],
            steal_rngs,
            p,
            root_result: None,
            abort: None,
            completions: BTreeMap::new(),
            slot_writes: BTreeMap::new(),
            claims_last_event: Vec::new(),
            any_failure_injected: false,
            staged_sends: Vec::new(),
            now: 0,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn worker(&self, w: WorkerId) -> &WorkerState {
        &self.workers[w]
    }

    pub fn worker_mut(&mut self, w: WorkerId) -> &mut WorkerState {
        &mut self.workers[w]
    }

    pub fn is_alive(&self, w: WorkerId) -> bool {
        self.alive[w]
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    pub fn alive_workers(&self) -> Vec<WorkerId> {
        (0..self.p).filter(|w| self.alive[*w]).collect()
    }

    pub fn abort_reason(&self) -> Option<&AbortReason> {
        self.abort.as_ref()
    }

    pub fn had_failures(&self) -> bool {
        self.any_failure_injected
    }

    pub fn set_step(&mut self, step: u64) {
        self.now = step;
        self.store.set_now(step);
        self.trace.set_step(step);
    }

    pub fn completions(&self) -> &BTreeMap<TaskPath, u32> {
        &self.completions
    }

    pub fn slot_writes(&self) -> &BTreeMap<(FrameId, usize), u32> {
        &self.slot_writes
    }

    fn record_abort(&mut self, e: HandlerError) {
        if self.abort.is_some() {
            return;
        }
        self.abort = Some(match e {
            HandlerError::Store(StoreError::StoreFailed) => AbortReason::StoreFailed,
            HandlerError::Store(err @ StoreError::StaleSequence { .. }) => {
                AbortReason::ProtocolViolation { detail: err.to_string() }
            }
            HandlerError::Violation(detail) => AbortReason::ProtocolViolation { detail },
        });
    }

    /// Kills workers outright (fail-stop). The driver is responsible for
    /// scheduling failure notices to the survivors.
    pub fn kill(&mut self, victims: &[WorkerId]) {
        for &v in victims {
            if self.alive[v] {
                self.alive[v] = false;
                self.any_failure_injected = true;
                self.trace.push("kill", Some(v), json!({}));
            }
        }
    }

    /// Injects the resilient-store failure.
    pub fn fail_store(&mut self) {
        self.store.fail();
        self.trace.push("store_fail", None, json!({}));
    }

    // ------------------------------------------------------------------
    // Public handlers
    // ------------------------------------------------------------------

    /// One worker micro-step: a recovery stage, picking work, or running one
    /// task section.
    pub fn tick(&mut self, w: WorkerId) -> Effects {
        let mut eff = Effects::default();
        if !self.alive[w] || self.abort.is_some() {
            return eff;
        }
        self.store.ops_this_handler = 0;
        self.claims_last_event.clear();
        let mut base_cost = 1;
        let res = self.tick_inner(w, &mut eff, &mut base_cost);
        eff.sends.append(&mut self.staged_sends);
        if let Err(e) = res {
            self.record_abort(e);
            return Effects::default();
        }
        self.finish(w, &mut eff, base_cost);
        eff
    }

    /// Delivers one message to a live worker.
    pub fn deliver(&mut self, to: WorkerId, from: Option<WorkerId>, msg: Message) -> Effects {
        let mut eff = Effects::default();
        if !self.alive[to] || self.abort.is_some() {
            return eff;
        }
        self.store.ops_this_handler = 0;
        self.claims_last_event.clear();
        let res = self.deliver_inner(to, from, msg, &mut eff);
        eff.sends.append(&mut self.staged_sends);
        if let Err(e) = res {
            self.record_abort(e);
            return Effects::default();
        }
        self.finish(to, &mut eff, 1);
        eff
    }

    /// Test-only scripting: make `thief` request a steal from `victim`.
    pub fn force_steal_request(&mut self, thief: WorkerId, victim: WorkerId) -> Effects {
        let mut eff = Effects::default();
        self.workers[thief].requested = Some(victim);
        eff.sends.push(Envelope { from: thief, to: victim, msg: Message::StealRequest { thief } });
        eff
    }

    fn finish(&mut self, w: WorkerId, eff: &mut Effects, base_cost: u64) {
        let cost = base_cost + self.store.ops_this_handler;
        if self.worker_has_work(w) {
            eff.wants_tick = Some(cost.max(1));
        }
        self.metrics.store_ops = self.store.ops_performed;
    }

    /// Whether the worker would do anything on its next tick.
    pub fn worker_has_work(&self, w: WorkerId) -> bool {
        if !self.alive[w] || self.root_result.is_some() {
            return false;
        }
        let ws = &self.workers[w];
        let rec = &self.recoveries[w];
        if rec.active.is_some() || !rec.queue.is_empty() {
            return true;
        }
        if ws.current.is_some() || !ws.pool.is_empty() || ws.resumable_held().is_some() {
            return true;
        }
        ws.requested.is_none() && !self.steal_candidates(w).is_empty()
    }

    fn steal_candidates(&self, w: WorkerId) -> Vec<WorkerId> {
        (0..self.p)
            .filter(|x| *x != w && !self.workers[w].known_failed.contains(x))
            .collect()
    }

    // ------------------------------------------------------------------
    // Tick internals
    // ------------------------------------------------------------------

    fn tick_inner(&mut self, w: WorkerId, eff: &mut Effects, base_cost: &mut u64) -> HandlerResult {
        if self.recoveries[w].active.is_some() || !self.recoveries[w].queue.is_empty() {
            return self.recovery_stage(w);
        }

        if self.workers[w].current.is_none() {
            if let Some(i) = self.workers[w].resumable_held() {
                let held = self.workers[w].held.remove(i);
                let ws = &mut self.workers[w];
                ws.current = Some(held.frame);
                ws.current_fresh = true;
            } else if let Some(f) = self.workers[w].pop_local() {
                let ws = &mut self.workers[w];
                ws.current = Some(f);
                ws.current_fresh = true;
            } else {
                // Hungry: become a thief if anyone is left to steal from.
                if self.workers[w].requested.is_none() {
                    let candidates = self.steal_candidates(w);
                    if candidates.is_empty() {
                        return Ok(());
                    }
                    let pick = candidates[self.steal_rngs[w].gen_range(0..candidates.len())];
                    self.workers[w].requested = Some(pick);
                    eff.sends.push(Envelope {
                        from: w,
                        to: pick,
                        msg: Message::StealRequest { thief: w },
                    });
                }
                return Ok(());
            }
        }

        // Occasion 1: right before branching into (or resuming) the current
        // task, gated by the task-count timer.
        if self.workers[w].current_fresh {
            self.workers[w].current_fresh = false;
            if timer_due(self.workers[w].tasks_since_ckpt, self.cfg.checkpoint_period) {
                self.write_checkpoint(w, CheckpointCause::Policy)?;
            }
        }

        *base_cost = self.program.section_cost.max(1);
        let frame = self.workers[w].current.as_ref().expect("current set");
        let action = crate::program::step_frame(frame, &self.program)
            .map_err(|e| HandlerError::Violation(format!("step failed: {e}")))?;
        match action {
            Action::Spawn { args, continuation } => self.apply_spawn(w, args, continuation),
            Action::Sync { continuation } => self.apply_sync(w, continuation),
            Action::Return(v) => self.apply_return(w, v),
        }
    }

    /// Work-first spawn: the parent continuation goes to the young end of
    /// the pool and the child becomes the current task.
    fn apply_spawn(&mut self, w: WorkerId, args: Vec<i64>, continuation: u32) -> HandlerResult {
        let child_id = self.workers[w].mint_frame_id();
        let ws = &mut self.workers[w];
        let mut parent = ws.current.take().expect("current set");
        let slot_idx = parent.slots.len();
        parent.section = continuation;
        parent.slots.push(Slot { child: child_id, expected_at: w, value: None });
        let mut path = parent.path.clone();
        path.push(slot_idx as u32);
        let child = Frame {
            id: child_id,
            program: parent.program.clone(),
            args,
            section: 0,
            slots: Vec::new(),
            parent: ParentRef::Parent { frame: parent.id, slot: slot_idx, home: w },
            path,
        };
        ws.pool.push_back(parent);
        ws.current = Some(child);
        ws.current_fresh = true;
        Ok(())
    }

    fn apply_sync(&mut self, w: WorkerId, continuation: u32) -> HandlerResult {
        let ws = &mut self.workers[w];
        let frame = ws.current.as_ref().expect("current set");
        match ws.hold_status(frame) {
            // Unstolen with every child accounted for: pass the sync.
            HoldStatus::Resume => {
                ws.current.as_mut().expect("current set").section = continuation;
                Ok(())
            }
            // A thief at a sync sends the frame back toward its victim, even
            // when nothing is left to match.
            HoldStatus::ForwardTo(victim) => {
                let frame = ws.current.take().expect("current set");
                self.send_frame_return(w, frame, victim)
            }
            // Blocked awaiting local results, or awaiting returns of frames
            // stolen from here; parked with the returned frames, never
            // stealable.
            HoldStatus::WaitLocal | HoldStatus::WaitRemote => {
                let frame = ws.current.take().expect("current set");
                self.workers[w].held.push(HeldFrame { frame, from: None });
                Ok(())
            }
        }
    }

    fn apply_return(&mut self, w: WorkerId, value: i64) -> HandlerResult {
        // Stolen goods never complete at a thief: a stolen frame reaching
        // its return (a leaf shipped as loot, or a post-sync continuation)
        // goes back to the victim and the final section re-runs at the
        // worker that ends up resuming it.
        let stolen_from = {
            let ws = &self.workers[w];
            ws.open_victim_of(ws.current.as_ref().expect("current set").id)
        };
        if let Some(victim) = stolen_from {
            let frame = self.workers[w].current.take().expect("current set");
            return self.send_frame_return(w, frame, victim);
        }

        let frame = self.workers[w].current.take().expect("current set");
        self.metrics.task_executions += 1;
        *self.completions.entry(frame.path.clone()).or_insert(0) += 1;
        self.trace.task_done(w, &frame.path, value);
        self.workers[w].tasks_since_ckpt += 1;

        match frame.parent {
            ParentRef::Root => {
                self.store.put_root_result(value)?;
                self.root_result = Some(value);
                self.trace.push("root_result", Some(w), json!({"value": value}));
            }
            ParentRef::Parent { frame: parent, slot, .. } => {
                self.incorporate(w, parent, slot, value, frame.id)?;
            }
        }

        // Occasion 2: after finishing a task and incorporating or saving its
        // result, gated by the timer.
        if timer_due(self.workers[w].tasks_since_ckpt, self.cfg.checkpoint_period) {
            self.write_checkpoint(w, CheckpointCause::Policy)?;
        }
        Ok(())
    }

    /// Writes a child result into its parent slot if the parent frame is
    /// local; otherwise saves the result for matching at frame return.
    fn incorporate(
        &mut self,
        w: WorkerId,
        parent: FrameId,
        slot: usize,
        value: i64,
        child: FrameId,
    ) -> HandlerResult {
        let ws = &mut self.workers[w];
        if let Some(f) = ws.find_frame_mut(parent) {
            if f.slots[slot].value.is_some() {
                return Err(HandlerError::Violation(format!(
                    "slot ({parent}, {slot}) written twice"
                )));
            }
            f.slots[slot].value = Some(value);
            *self.slot_writes.entry((parent, slot)).or_insert(0) += 1;
            self.evaluate_held(w, parent)?;
        } else {
            let thief = ws.open_thief_of(parent).ok_or_else(|| {
                HandlerError::Violation(format!(
                    "worker {w}: parent {parent} absent with no open thief"
                ))
            })?;
            ws.saved_results.push(SavedResult {
                parent,
                slot,
                child,
                value,
                thief_expected_at: thief,
            });
            self.trace.saved(w, parent, thief);
        }
        Ok(())
    }

    /// Re-examines a held frame after one of its slots changed: forwards it
    /// down the steal chain once this worker's contribution is matched.
    fn evaluate_held(&mut self, w: WorkerId, frame: FrameId) -> HandlerResult {
        let ws = &self.workers[w];
        let Some(idx) = ws.held.iter().position(|h| h.frame.id == frame) else {
            return Ok(());
        };
        match ws.hold_status(&ws.held[idx].frame) {
            HoldStatus::ForwardTo(victim) => {
                let held = self.workers[w].held.remove(idx);
                self.send_frame_return(w, held.frame, victim)
            }
            // Resume is picked up by the next tick; waits stay parked.
            _ => Ok(()),
        }
    }

    // ------------------------------------------------------------------
    // Frame return protocol
    // ------------------------------------------------------------------

    /// Thief side of the frame-return protocol: park the frame in the store,
    /// checkpoint with the frame removed and the victim dropped, then send.
    fn send_frame_return(&mut self, w: WorkerId, frame: Frame, victim: WorkerId) -> HandlerResult {
        self.workers[w].remove_open_victim(frame.id);
        let target = self.resolve_alive(w, victim);
        if target == w {
            // This worker absorbed its own victim; incorporate locally.
            self.workers[w].remove_open_thief(frame.id);
            self.trace.frame_return(w, w, frame.id, 0);
            return self.accept_returned_frame(w, frame, w, None);
        }
        let key = self.store.next_transit_key();
        let record = TransitRecord {
            transit_key: key,
            kind: TransitKind::ReturnedFrame,
            frame: frame.clone(),
            from: w,
            to: target,
            claimed_by: None,
        };
        self.store.put_transit(record)?;
        self.metrics.transit_created += 1;
        self.trace.transit("create", "returned_frame", key, w);
        self.write_checkpoint(w, CheckpointCause::ReturnSender)?;
        self.workers[w].outstanding_sends.push((key, target));
        self.trace.frame_return(w, target, frame.id, key);
        // The effects of this send are queued by the caller's handler.
        self.pending_send(w, target, Message::FrameReturn { frame, transit_key: key });
        Ok(())
    }

    // Sends initiated deep inside handlers are staged here and drained into
    // the handler's Effects.
    fn pending_send(&mut self, from: WorkerId, to: WorkerId, msg: Message) {
        self.staged_sends.push(Envelope { from, to, msg });
    }

    /// Victim side of a frame return (or a post-absorption self delivery):
    /// match results, checkpoint including the returned frame, delete the
    /// transit record, and continue the chain if the frame is stolen goods.
    fn accept_returned_frame(
        &mut self,
        w: WorkerId,
        mut frame: Frame,
        from_thief: WorkerId,
        transit: Option<u64>,
    ) -> HandlerResult {
        {
            let ws = &mut self.workers[w];
            WorkerState::apply_pending_relocs(&mut frame, &mut ws.pending_relocs);
        }
        self.match_saved(w, &mut frame)?;
        self.workers[w].held.push(HeldFrame { frame: frame.clone(), from: Some(from_thief) });
        self.write_checkpoint(w, CheckpointCause::ReturnReceipt)?;
        if let Some(key) = transit {
            self.store.delete_transit(key)?;
            self.trace.transit("delete", "returned_frame", key, w);
        }
        self.evaluate_held(w, frame.id)
    }

    fn match_saved(&mut self, w: WorkerId, frame: &mut Frame) -> HandlerResult {
        let ws = &mut self.workers[w];
        let mut i = 0;
        while i < ws.saved_results.len() {
            if ws.saved_results[i].parent == frame.id {
                let sr = ws.saved_results.remove(i);
                if frame.slots[sr.slot].value.is_some() {
                    return Err(HandlerError::Violation(format!(
                        "saved result for filled slot ({}, {})",
                        frame.id, sr.slot
                    )));
                }
                frame.slots[sr.slot].value = Some(sr.value);
                *self.slot_writes.entry((frame.id, sr.slot)).or_insert(0) += 1;
            } else {
                i += 1;
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Message delivery
    // ------------------------------------------------------------------

    fn deliver_inner(
        &mut self,
        w: WorkerId,
        from: Option<WorkerId>,
        msg: Message,
        eff: &mut Effects,
    ) -> HandlerResult {
        match msg {
            Message::StealRequest { thief } => self.on_steal_request(w, thief, eff),
            Message::Loot { frame, transit_key } => self.on_loot(w, from, frame, transit_key),
            Message::NoLoot => {
                if let Some(v) = from {
                    if self.workers[w].requested == Some(v) {
                        self.workers[w].requested = None;
                    }
                }
                Ok(())
            }
            Message::FrameReturn { frame, transit_key } => {
                self.on_frame_return(w, frame, transit_key)
            }
            Message::ResultDelivery { child, parent, slot, value } => {
                self.on_result_delivery(w, from, child, parent, slot, value)
            }
            Message::ResultLocationUpdate { child, parent, slot, new_holder } => {
                self.on_result_location_update(w, child, parent, slot, new_holder)
            }
            Message::FailureNotice { failed } => self.on_failure_notice(w, &failed),
        }
    }

    /// Victim side of the resilient steal: extract the oldest frame, commit
    /// the shrunk checkpoint and the loot record atomically, then send.
    fn on_steal_request(&mut self, w: WorkerId, thief: WorkerId, eff: &mut Effects) -> HandlerResult {
        if self.workers[w].pool.is_empty() {
            eff.sends.push(Envelope { from: w, to: thief, msg: Message::NoLoot });
            return Ok(());
        }
        let loot = self.workers[w].extract_oldest().expect("non-empty pool");
        let at = self.now;
        self.workers[w].open_thieves.push(StealLink { peer: thief, frame: loot.id, at });
        let key = self.store.next_transit_key();
        let record = TransitRecord {
            transit_key: key,
            kind: TransitKind::Loot,
            frame: loot.clone(),
            from: w,
            to: thief,
            claimed_by: None,
        };
        let cp = self.build_checkpoint(w);
        self.store.atomic_steal_commit(cp, record)?;
        self.after_checkpoint(w, CheckpointCause::StealVictim);
        self.metrics.transit_created += 1;
        self.trace.transit("create", "loot", key, w);
        self.trace.steal(w, thief, loot.id, key);
        self.workers[w].outstanding_sends.push((key, thief));
        eff.sends.push(Envelope {
            from: w,
            to: thief,
            msg: Message::Loot { frame: loot, transit_key: key },
        });
        Ok(())
    }

    /// Thief side of the resilient steal: adopt the loot, checkpoint with it
    /// as the next task, then delete the transit record.
    fn on_loot(
        &mut self,
        w: WorkerId,
        from: Option<WorkerId>,
        mut frame: Frame,
        key: u64,
    ) -> HandlerResult {
        let Some(rec) = self.store.get_transit(key)? else {
            // Already consumed elsewhere; stale duplicate.
            self.trace.push("stale_drop", Some(w), json!({"key": key}));
            return Ok(());
        };
        if rec.to != w {
            self.trace.push("stale_drop", Some(w), json!({"key": key, "addressed_to": rec.to}));
            return Ok(());
        }
        if let Some(v) = from {
            if self.workers[w].requested == Some(v) {
                self.workers[w].requested = None;
            }
        }
        {
            let ws = &mut self.workers[w];
            WorkerState::apply_pending_relocs(&mut frame, &mut ws.pending_relocs);
        }
        // A frame stolen back to a worker that saved results for it picks
        // them up on arrival.
        self.match_saved(w, &mut frame)?;
        {
            let ws = &mut self.workers[w];
            // The record's responsible sender is the worker this frame must
            // eventually be returned to.
            ws.open_victims.push(StealLink { peer: rec.from, frame: frame.id, at });
            if ws.current.is_none() {
                ws.current = Some(frame);
                ws.current_fresh = true;
            } else {
                ws.pool.push_back(frame);
            }
        }
        self.write_checkpoint(w, CheckpointCause::StealThief)?;
        self.store.delete_transit(key)?;
        self.trace.transit("delete", "loot", key, w);
        Ok(())
    }

    fn on_frame_return(&mut self, w: WorkerId, frame: Frame, key: u64) -> HandlerResult {
        let Some(rec) = self.store.get_transit(key)? else {
            self.trace.push("stale_drop", Some(w), json!({"key": key}));
            return Ok(());
        };
        if rec.to != w && !self.workers[w].absorbed.contains(&rec.to) {
            self.trace.push("stale_drop", Some(w), json!({"key": key, "addressed_to": rec.to}));
            return Ok(());
        }
        if let Some(link) = self.workers[w].remove_open_thief(frame.id) {
            self.accept_returned_frame(w, frame, link.peer, Some(key))
        } else {
            // Addressed to an identity this worker has not absorbed yet
            // (adoption in progress); park until the merge completes.
            self.workers[w].pending_returns.push(PendingReturn {
                transit_key: key,
                frame,
                thief: rec.from,
                recorded_to: rec.to,
            });
            self.trace.push("buffer_return", Some(w), json!({"key": key, "recorded_to": rec.to}));
            Ok(())
        }
    }

    fn on_result_delivery(
        &mut self,
        w: WorkerId,
        from: Option<WorkerId>,
        child: FrameId,
        parent: FrameId,
        slot: usize,
        value: i64,
    ) -> HandlerResult {
        let ws = &mut self.workers[w];
        if let Some(f) = ws.find_frame_mut(parent) {
            if f.slots[slot].value.is_some() {
                return Err(HandlerError::Violation(format!(
                    "delivered result for filled slot ({parent}, {slot})"
                )));
            }
            f.slots[slot].value = Some(value);
            *self.slot_writes.entry((parent, slot)).or_insert(0) += 1;
            self.evaluate_held(w, parent)
        } else {
            let thief = ws.open_thief_of(parent).or(from).unwrap_or(w);
            ws.saved_results.push(SavedResult {
                parent,
                slot,
                child,
                value,
                thief_expected_at: thief,
            });
            self.trace.saved(w, parent, thief);
            Ok(())
        }
    }

    fn on_result_location_update(
        &mut self,
        w: WorkerId,
        child: FrameId,
        parent: FrameId,
        slot: usize,
        new_holder: WorkerId,
    ) -> HandlerResult {
        let ws = &mut self.workers[w];
        if let Some(f) = ws.find_frame_mut(parent) {
            if let Some(s) = f.slots.get_mut(slot) {
                if s.value.is_none() {
                    s.expected_at = new_holder;
                }
            }
            self.trace.push(
                "reloc_apply",
                Some(w),
                json!({"child": child.to_string(), "new_holder": new_holder}),
            );
        } else {
            ws.pending_relocs.push(PendingRelocation { child, parent, slot, new_holder });
            self.trace.push(
                "reloc_apply",
                Some(w),
                json!({"child": child.to_string(), "new_holder": new_holder, "buffered": true}),
            );
        }
        Ok(())
    }

    fn on_failure_notice(&mut self, w: WorkerId, failed: &[WorkerId]) -> HandlerResult {
        for &f in failed {
            self.workers[w].known_failed.insert(f);
        }
        self.trace.push("notice", Some(w), json!({"failed": failed}));
        if let Some(v) = self.workers[w].requested {
            if self.workers[w].known_failed.contains(&v) {
                // Pending steal request died with its victim; re-steal later.
                self.workers[w].requested = None;
            }
        }
        self.retarget_outstanding(w)?;
        self.evaluate_buddy_duties(w);
        Ok(())
    }

    /// Sender-side rerouting: parked records addressed to a now-dead worker
    /// are re-pointed at its buddy chain and the message is re-sent.
    fn retarget_outstanding(&mut self, w: WorkerId) -> HandlerResult {
        let outstanding = std::mem::take(&mut self.workers[w].outstanding_sends);
        let mut kept = Vec::new();
        for (key, dest) in outstanding {
            if !self.workers[w].known_failed.contains(&dest) {
                kept.push((key, dest));
                continue;
            }
            match self.store.get_transit(key)? {
                None => {} // consumed before the failure; nothing to do
                Some(rec) => {
                    let new_to = self.resolve_alive(w, dest);
                    if new_to == w {
                        // The buddy chain ends here; take the frame back.
                        // The adoption must be durable before the record is
                        // gone, exactly like a normal receipt.
                        let cause = match rec.kind {
                            TransitKind::Loot => CheckpointCause::StealThief,
                            TransitKind::ReturnedFrame => CheckpointCause::ReturnReceipt,
                        };
                        self.adopt_transit_record(w, rec)?;
                        self.write_checkpoint(w, cause)?;
                        continue;
                    }
                    self.store.retarget_transit(key, w, new_to)?;
                    let msg = match rec.kind {
                        TransitKind::Loot => Message::Loot { frame: rec.frame, transit_key: key },
                        TransitKind::ReturnedFrame => {
                            Message::FrameReturn { frame: rec.frame, transit_key: key }
                        }
                    };
                    self.trace.push(
                        "retarget",
                        Some(w),
                        json!({"key": key, "old": dest, "new": new_to}),
                    );
                    self.pending_send(w, new_to, msg);
                    kept.push((key, new_to));
                }
            }
        }
        self.workers[w].outstanding_sends = kept;
        Ok(())
    }

    /// Enqueues recovery for every known-failed worker whose ring buddy this
    /// worker currently is.
    fn evaluate_buddy_duties(&mut self, w: WorkerId) {
        let view: BTreeSet<WorkerId> = (0..self.p)
            .filter(|x| !self.workers[w].known_failed.contains(x))
            .collect();
        let failed: Vec<WorkerId> = self.workers[w].known_failed.iter().copied().collect();
        for f in failed {
            if self.workers[w].absorbed.contains(&f) || self.recoveries[w].settled.contains(&f) {
                continue;
            }
            if buddy_of(f, &view, self.p) != Some(w) {
                continue;
            }
            let rec = &mut self.recoveries[w];
            let queued = rec.queue.contains(&f)
                || rec.active.as_ref().map(|a| a.failed == f).unwrap_or(false);
            if !queued {
                rec.queue.push_back(f);
            }
        }
    }

    /// Resolves a possibly-dead worker to the live end of its buddy chain,
    /// as seen through this worker's failure knowledge.
    fn resolve_alive(&self, w: WorkerId, mut target: WorkerId) -> WorkerId {
        let view: BTreeSet<WorkerId> = (0..self.p)
            .filter(|x| !self.workers[w].known_failed.contains(x))
            .collect();
        let mut hops = 0;
        while self.workers[w].known_failed.contains(&target) && hops <= self.p {
            match buddy_of(target, &view, self.p) {
                Some(b) => target = b,
                None => return w,
            }
            hops += 1;
        }
        target
    }

    // ------------------------------------------------------------------
    // Recovery stages (one atomic event each)
    // ------------------------------------------------------------------

    fn recovery_stage(&mut self, w: WorkerId) -> HandlerResult {
        if self.recoveries[w].active.is_none() {
            let Some(failed) = self.recoveries[w].queue.pop_front() else {
                return Ok(());
            };
            if self.workers[w].absorbed.contains(&failed)
                || self.recoveries[w].settled.contains(&failed)
            {
                return Ok(());
            }
            self.recoveries[w].active = Some(ActiveRecovery {
                failed,
                stage: RecoveryStage::Claim,
                staging: Staging::default(),
            });
        }
        let (failed, stage) = {
            let a = self.recoveries[w].active.as_ref().expect("active recovery");
            (a.failed, a.stage)
        };
        match stage {
            RecoveryStage::Claim => self.recovery_claim(w, failed),
            RecoveryStage::ReadState => self.recovery_read_state(w, failed),
            RecoveryStage::ScanTransit => self.recovery_scan_transit(w, failed),
            RecoveryStage::Notify => self.recovery_notify(w, failed),
            RecoveryStage::Commit => self.recovery_commit(w, failed),
        }
    }

    fn set_stage(&mut self, w: WorkerId, stage: RecoveryStage) {
        if let Some(a) = self.recoveries[w].active.as_mut() {
            a.stage = stage;
        }
    }

    fn recovery_claim(&mut self, w: WorkerId, failed: WorkerId) -> HandlerResult {
        match self.store.claim_for_recovery(failed, w)? {
            ClaimOutcome::Claimed => {
                self.trace.push("claim", Some(w), json!({"failed": failed}));
                self.claims_last_event.push((failed, w));
                self.set_stage(w, RecoveryStage::ReadState);
            }
            ClaimOutcome::AlreadyClaimed { by, complete } => {
                if complete {
                    self.recoveries[w].settled.insert(failed);
                    self.recoveries[w].active = None;
                } else if by == w {
                    self.set_stage(w, RecoveryStage::ReadState);
                } else if self.workers[w].known_failed.contains(&by) {
                    // The prior claimant died mid-recovery; take its role.
                    self.store.supersede_claim(failed, w)?;
                    self.trace.push("supersede", Some(w), json!({"failed": failed, "over": by}));
                    self.claims_last_event.push((failed, w));
                    self.set_stage(w, RecoveryStage::ReadState);
                } else {
                    // A live worker owns this recovery.
                    self.recoveries[w].active = None;
                }
            }
        }
        Ok(())
    }

    fn recovery_read_state(&mut self, w: WorkerId, failed: WorkerId) -> HandlerResult {
        let cp = self.store.get_checkpoint(failed)?;
        let mut snap = cp.state;
        // Results the failed worker (or anything it had absorbed) expected
        // locally will now materialize here.
        let mut mine: BTreeSet<WorkerId> = snap.absorbed.clone();
        mine.insert(failed);
        mine.extend(self.workers[w].absorbed.iter().copied());
        let rewrite = |f: &mut Frame| {
            for s in f.slots.iter_mut() {
                if s.value.is_none() && mine.contains(&s.expected_at) {
                    s.expected_at = w;
                }
            }
        };
        snap.pool.iter_mut().for_each(rewrite);
        snap.held.iter_mut().for_each(|h| rewrite(&mut h.frame));
        if let Some(n) = snap.next_task.as_mut() {
            rewrite(n);
        }
        self.trace.push(
            "adopt_state",
            Some(w),
            json!({
                "failed": failed,
                "seq": cp.seq,
                "pool": snap.pool.len(),
                "saved": snap.saved_results.len(),
                "held": snap.held.len(),
                "next_task": snap.next_task.is_some(),
            }),
        );
        if let Some(a) = self.recoveries[w].active.as_mut() {
            a.staging.snapshot = Some(snap);
        }
        self.set_stage(w, RecoveryStage::ScanTransit);
        Ok(())
    }

    fn recovery_scan_transit(&mut self, w: WorkerId, failed: WorkerId) -> HandlerResult {
        let recs = self.store.scan_transit(failed)?;
        let known_failed = self.workers[w].known_failed.clone();
        let mut adopt = Vec::new();
        let mut reroute = Vec::new();
        for rec in recs {
            if rec.to == failed {
                adopt.push(rec);
            } else if rec.from == failed && known_failed.contains(&rec.to) {
                // Both endpoints dead; act as the dead sender's proxy.
                reroute.push(rec);
            }
            // from == failed with a live destination: the message is in
            // flight or delivered; the receiver will consume the record.
        }
        self.trace.push(
            "adopt_transit",
            Some(w),
            json!({"failed": failed, "adopt": adopt.len(), "reroute": reroute.len()}),
        );
        if let Some(a) = self.recoveries[w].active.as_mut() {
            a.staging.adopt_transit = adopt;
            a.staging.reroute = reroute;
        }
        self.set_stage(w, RecoveryStage::Notify);
        Ok(())
    }

    /// Tells each thief holding a parent frame where the adopted saved
    /// results now live; dead thieves are resolved through their buddies.
    fn recovery_notify(&mut self, w: WorkerId, _failed: WorkerId) -> HandlerResult {
        let saved: Vec<SavedResult> = self.recoveries[w]
            .active
            .as_ref()
            .and_then(|a| a.staging.snapshot.as_ref())
            .map(|s| s.saved_results.clone())
            .unwrap_or_default();
        for sr in saved {
            let target = self.resolve_alive(w, sr.thief_expected_at);
            if target == w {
                continue; // the frame will come home on its own
            }
            self.metrics.relocations += 1;
            self.trace.reloc(w, target, sr.child, sr.thief_expected_at);
            self.pending_send(
                w,
                target,
                Message::ResultLocationUpdate {
                    child: sr.child,
                    parent: sr.parent,
                    slot: sr.slot,
                    new_holder: w,
                },
            );
        }
        self.set_stage(w, RecoveryStage::Commit);
        Ok(())
    }

    fn adopt_transit_record(&mut self, w: WorkerId, rec: TransitRecord) -> HandlerResult {
        if self.workers[w].holds_frame(rec.frame.id) {
            // Already restored through the checkpoint; drop the duplicate.
            self.store.delete_transit(rec.transit_key)?;
            self.trace.transit("adopt_dup", "transit", rec.transit_key, w);
            return Ok(());
        }
        self.store.mark_transit_claimed(rec.transit_key, w)?;
        match rec.kind {
            TransitKind::Loot => {
                let mut frame = rec.frame;
                {
                    let ws = &mut self.workers[w];
                    WorkerState::apply_pending_relocs(&mut frame, &mut ws.pending_relocs);
                }
                self.match_saved(w, &mut frame)?;
                let taking_back =
                    rec.from == w || self.workers[w].absorbed.contains(&rec.from);
                {
                    let ws = &mut self.workers[w];
                    if taking_back {
                        // Loot back on the victim side: the dead thief's
                        // outstanding return is cancelled.
                        ws.remove_open_thief(frame.id);
                    } else {
                        // Adopted on behalf of the dead thief: the frame
                        // still owes a return to the record's sender.
                        ws.open_victims.push(StealLink { peer: rec.from, frame: frame.id, at });
                    }
                    ws.pool.push_back(frame);
                }
                self.store.delete_transit(rec.transit_key)?;
                self.trace.transit("adopt", "loot", rec.transit_key, w);
            }
            TransitKind::ReturnedFrame => {
                self.workers[w].remove_open_thief(rec.frame.id);
                let mut frame = rec.frame;
                {
                    let ws = &mut self.workers[w];
                    WorkerState::apply_pending_relocs(&mut frame, &mut ws.pending_relocs);
                }
                self.match_saved(w, &mut frame)?;
                self.workers[w].held.push(HeldFrame { frame, from: Some(rec.from) });
                self.store.delete_transit(rec.transit_key)?;
                self.trace.transit("adopt", "returned_frame", rec.transit_key, w);
            }
        }
        Ok(())
    }

    fn recovery_commit(&mut self, w: WorkerId, failed: WorkerId) -> HandlerResult {
        let active = self.recoveries[w].active.take().expect("active recovery");
        let staging = active.staging;
        let snap = staging.snapshot.unwrap_or_default();

        // Merge the adopted state. Adopted pool frames keep their relative
        // age order at the young end, so re-execution stays depth-first; the
        // interrupted next task runs first of all.
        {
            let ws = &mut self.workers[w];
            for f in snap.pool {
                ws.pool.push_back(f);
            }
            if let Some(next) = snap.next_task {
                ws.pool.push_back(next);
            }
            ws.saved_results.extend(snap.saved_results);
            ws.open_victims.extend(snap.open_victims);
            ws.open_thieves.extend(snap.open_thieves);
            ws.held.extend(snap.held);
            ws.absorbed.insert(failed);
            ws.absorbed.extend(snap.absorbed.iter().copied());
        }

        for rec in staging.adopt_transit {
            self.adopt_transit_record(w, rec)?;
        }
        for rec in staging.reroute {
            let new_to = self.resolve_alive(w, rec.to);
            if new_to == w {
                self.adopt_transit_record(w, rec)?;
                continue;
            }
            self.store.retarget_transit(rec.transit_key, w, new_to)?;
            let msg = match rec.kind {
                TransitKind::Loot => {
                    Message::Loot { frame: rec.frame.clone(), transit_key: rec.transit_key }
                }
                TransitKind::ReturnedFrame => {
                    Message::FrameReturn { frame: rec.frame.clone(), transit_key: rec.transit_key }
                }
            };
            self.trace.push(
                "retarget",
                Some(w),
                json!({"key": rec.transit_key, "old": rec.to, "new": new_to}),
            );
            self.workers[w].outstanding_sends.push((rec.transit_key, new_to));
            self.pending_send(w, new_to, msg);
        }

        // Consolidate: saved results and buffered relocations may now match
        // adopted frames.
        self.consolidate_held(w)?;

        // The merged state becomes durable and the adoption completes in the
        // same indivisible event.
        self.write_checkpoint(w, CheckpointCause::RecoveryMerge)?;
        self.store.complete_adoption(failed)?;
        self.metrics.recovery_count += 1;
        self.trace.recover(w, failed, json!({"absorbed": self.workers[w].absorbed.len()}));

        // Chains: this worker may now be buddy for earlier failures whose
        // claimants died, and buffered returns may have become matchable.
        self.evaluate_buddy_duties(w);
        let held_ids: Vec<FrameId> =
            self.workers[w].held.iter().map(|h| h.frame.id).collect();
        for fid in held_ids {
            self.evaluate_held(w, fid)?;
        }
        self.drain_pending_returns(w)?;
        Ok(())
    }

    /// Matches saved results and buffered relocations into every frame in
    /// custody: current, pool, and held.
    fn consolidate_held(&mut self, w: WorkerId) -> HandlerResult {
        if let Some(mut cur) = self.workers[w].current.take() {
            {
                let ws = &mut self.workers[w];
                WorkerState::apply_pending_relocs(&mut cur, &mut ws.pending_relocs);
            }
            self.match_saved(w, &mut cur)?;
            self.workers[w].current = Some(cur);
        }
        let mut held = std::mem::take(&mut self.workers[w].held);
        for h in held.iter_mut() {
            {
                let ws = &mut self.workers[w];
                WorkerState::apply_pending_relocs(&mut h.frame, &mut ws.pending_relocs);
            }
            self.match_saved(w, &mut h.frame)?;
        }
        self.workers[w].held = held;
        let mut pool = std::mem::take(&mut self.workers[w].pool);
        for f in pool.iter_mut() {
            {
                let ws = &mut self.workers[w];
                WorkerState::apply_pending_relocs(f, &mut ws.pending_relocs);
            }
            self.match_saved(w, f)?;
        }
        self.workers[w].pool = pool;
        Ok(())
    }

    fn drain_pending_returns(&mut self, w: WorkerId) -> HandlerResult {
        let pending = std::mem::take(&mut self.workers[w].pending_returns);
        for entry in pending {
            match self.store.get_transit(entry.transit_key)? {
                None => {} // consumed elsewhere; the frame is safe
                Some(rec) => {
                    let ours = rec.to == w || self.workers[w].absorbed.contains(&rec.to);
                    if !ours {
                        continue; // re-addressed to someone else
                    }
                    if let Some(link) = self.workers[w].remove_open_thief(rec.frame.id) {
                        self.accept_returned_frame(w, rec.frame, link.peer, Some(entry.transit_key))?;
                    } else {
                        self.workers[w].pending_returns.push(entry);
                    }
                }
            }
        }
        Ok(())
    }

    /// Diagnostic dump for deadlock reports.
    pub fn diagnostics(&self) -> String {
        let mut out = String::new();
        let show_frame = |f: &Frame| {
            let slots: Vec<String> = f
                .slots
                .iter()
                .map(|s| match s.value {
                    Some(v) => format!("{v}"),
                    None => format!("?{}@{}", s.child, s.expected_at),
                })
                .collect();
            format!("{}(s{} path{:?} [{}])", f.id, f.section, f.path, slots.join(","))
        };
        for w in 0..self.p {
            let ws = &self.workers[w];
            out.push_str(&format!(
                "worker {w}: alive={} mode={:?} current={:?} pool={:?} \
                 held={:?} saved={:?} victims={:?} thieves={:?} pending_returns={} \
                 requested={:?} absorbed={:?}\n",
                self.alive[w],
                ws.mode(),
                ws.current.as_ref().map(show_frame),
                ws.pool.iter().map(show_frame).collect::<Vec<_>>(),
                ws.held.iter().map(|h| show_frame(&h.frame)).collect::<Vec<_>>(),
                ws.saved_results
                    .iter()
                    .map(|s| format!("({},{})={} thief{}", s.parent, s.slot, s.value, s.thief_expected_at))
                    .collect::<Vec<_>>(),
                ws.open_victims,
                ws.open_thieves,
                ws.pending_returns.len(),
                ws.requested,
                ws.absorbed,
            ));
        }
        let transit: Vec<String> = self
            .store
            .peek_transit()
            .map(|r| format!("{}:{:?}->{}..{}", r.transit_key, r.kind, r.from, r.to))
            .collect();
        out.push_str(&format!("transit: {transit:?}\n"));
        out.push_str(&format!("root_result: {:?}\n", self.root_result));
        out
    }

    // ------------------------------------------------------------------
    // Checkpoint writing
    // ------------------------------------------------------------------

    fn build_checkpoint(&self, w: WorkerId) -> Checkpoint {
        let ws = &self.workers[w];
        let include_next = ws.current.is_some();
        Checkpoint {
            worker: w,
            seq: ws.ckpt_seq + 1,
            occasion: if include_next {
                CheckpointOccasion::BeforeBranch
            } else {
                CheckpointOccasion::AfterFinish
            },
            state: ws.snapshot(include_next),
        }
    }

    fn after_checkpoint(&mut self, w: WorkerId, cause: CheckpointCause) {
        let ws = &mut self.workers[w];
        ws.ckpt_seq += 1;
        ws.tasks_since_ckpt = 0;
        self.metrics.checkpoints_written += 1;
        let occasion = self
            .store
            .peek_checkpoint(w)
            .map(|s| s.checkpoint.occasion)
            .unwrap_or(CheckpointOccasion::AfterFinish);
        self.trace.ckpt(w, self.workers[w].ckpt_seq, occasion, cause);
    }

    fn write_checkpoint(&mut self, w: WorkerId, cause: CheckpointCause) -> HandlerResult {
        let cp = self.build_checkpoint(w);
        self.store.put_checkpoint(cp)?;
        self.after_checkpoint(w, cause);
        Ok(())
    }
}

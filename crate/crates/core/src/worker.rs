//! Per-worker state for work-first work stealing with private pools.
//!
//! A worker owns a pool of continuation frames (oldest at the front, pushes
//! and local pops at the back, steals from the front), an optional current
//! frame it is executing section by section, held frames awaiting result
//! incorporation, locally saved results whose parent frame is away, and the
//! identities of its open victims and thieves. All cross-worker interaction
//! goes through messages and the resilient store.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::program::{Frame, FrameId, TaskPath};

pub type WorkerId = usize;

/// A child result kept locally because the parent frame is away at a thief.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedResult {
    pub parent: FrameId,
    pub slot: usize,
    pub child: FrameId,
    pub value: i64,
    /// Thief believed to hold the parent frame when the result was saved.
    pub thief_expected_at: WorkerId,
}

/// One leg of an unresolved steal: the peer worker, the stolen frame, and
/// when the steal happened. A frame's steal episodes form a path ordered by
/// time; returns unwind the newest edge first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StealLink {
    pub peer: WorkerId,
    pub frame: FrameId,
    pub at: u64,
}

/// A frame parked at this worker awaiting result incorporation: either
/// returned by a thief (`from` names it) or blocked locally at a sync.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldFrame {
    pub frame: Frame,
    pub from: Option<WorkerId>,
}

/// Scheduling mode, derived for reporting; excluded from checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Working,
    Idle,
    Stealing,
}

/// What to do with a frame at a sync or after a slot fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoldStatus {
    /// Results produced at this worker are still outstanding; keep holding.
    WaitLocal,
    /// This worker's contribution is matched and the frame is stolen goods;
    /// return it to the victim it was stolen from.
    ForwardTo(WorkerId),
    /// All slots filled and the frame is unstolen here; resume it locally.
    Resume,
    /// At its origin with remote results still inbound (returns of frames
    /// stolen from this worker); keep holding.
    WaitRemote,
}

/// Messages exchanged between workers. Every `Loot`/`FrameReturn` carries the
/// key of a transit record persisted before the message was sent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    StealRequest { thief: WorkerId },
    Loot { frame: Frame, transit_key: u64 },
    NoLoot,
    FrameReturn { frame: Frame, transit_key: u64 },
    ResultDelivery { child: FrameId, parent: FrameId, slot: usize, value: i64 },
    ResultLocationUpdate { child: FrameId, parent: FrameId, slot: usize, new_holder: WorkerId },
    FailureNotice { failed: Vec<WorkerId> },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::StealRequest { .. } => "StealRequest",
            Message::Loot { .. } => "Loot",
            Message::NoLoot => "NoLoot",
            Message::FrameReturn { .. } => "FrameReturn",
            Message::ResultDelivery { .. } => "ResultDelivery",
            Message::ResultLocationUpdate { .. } => "ResultLocationUpdate",
            Message::FailureNotice { .. } => "FailureNotice",
        }
    }
}

/// The checkpointable part of a worker's state: pool, saved results, held
/// frames, open victim/thief identities, optionally the next task, plus the
/// set of failed-worker identities this worker has absorbed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WorkerSnapshot {
    pub pool: Vec<Frame>,
    pub saved_results: Vec<SavedResult>,
    pub held: Vec<HeldFrame>,
    pub open_victims: Vec<StealLink>,
    pub open_thieves: Vec<StealLink>,
    pub next_task: Option<Frame>,
    pub absorbed: BTreeSet<WorkerId>,
}

/// A buffered frame return that could not be matched yet (its transit record
/// addresses a worker this one has not absorbed). Re-examined on absorption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingReturn {
    pub transit_key: u64,
    pub frame: Frame,
    pub thief: WorkerId,
    pub recorded_to: WorkerId,
}

/// A buffered relocation notice for a frame not currently held here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingRelocation {
    pub child: FrameId,
    pub parent: FrameId,
    pub slot: usize,
    pub new_holder: WorkerId,
}

#[derive(Debug, Clone)]
pub struct WorkerState {
    pub id: WorkerId,
    pub pool: VecDeque<Frame>,
    pub current: Option<Frame>,
    /// The current frame was just activated (branched into, stolen, or
    /// resumed) and has not run a section yet.
    pub current_fresh: bool,
    pub held: Vec<HeldFrame>,
    pub saved_results: Vec<SavedResult>,
    pub open_victims: Vec<StealLink>,
    pub open_thieves: Vec<StealLink>,
    /// Workers this one knows to have failed.
    pub known_failed: BTreeSet<WorkerId>,
    /// Failed workers whose state this one has fully adopted (transitive).
    pub absorbed: BTreeSet<WorkerId>,
    /// Outstanding steal request, if any.
    pub requested: Option<WorkerId>,
    /// Checkpoint sequence of the last written checkpoint.
    pub ckpt_seq: u64,
    /// Completed tasks since the last checkpoint write (the R timer).
    pub tasks_since_ckpt: u32,
    frame_ctr: u64,
    pub pending_returns: Vec<PendingReturn>,
    pub pending_relocs: Vec<PendingRelocation>,
    /// Transit records this worker sent and has not observed consumed:
    /// (transit key, destination). Probed on failure notices.
    pub outstanding_sends: Vec<(u64, WorkerId)>,
}

impl WorkerState {
    pub fn new(id: WorkerId) -> Self {
        WorkerState {
            id,
            pool: VecDeque::new(),
            current: None,
            current_fresh: false,
            held: Vec::new(),
            saved_results: Vec::new(),
            open_victims: Vec::new(),
            open_thieves: Vec::new(),
            known_failed: BTreeSet::new(),
            absorbed: BTreeSet::new(),
            requested: None,
            ckpt_seq: 0,
            tasks_since_ckpt: 0,
            frame_ctr: 0,
            pending_returns: Vec::new(),
            pending_relocs: Vec::new(),
            outstanding_sends: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        if self.current.is_some() || !self.pool.is_empty() {
            Mode::Working
        } else if self.requested.is_some() {
            Mode::Stealing
        } else {
            Mode::Idle
        }
    }

    pub fn mint_frame_id(&mut self) -> FrameId {
        self.frame_ctr += 1;
        FrameId { origin: self.id, seq: self.frame_ctr }
    }

    /// Extracts the oldest pool frame for a thief.
    pub fn extract_oldest(&mut self) -> Option<Frame> {
        self.pool.pop_front()
    }

    /// Pops the youngest pool frame for local execution.
    pub fn pop_local(&mut self) -> Option<Frame> {
        self.pool.pop_back()
    }

    // A frame can be stolen from (or to) the same worker more than once, and
    // adoption can merge a failed worker's episodes into this one's lists,
    // so the victim/thief lists may carry several entries per frame. Returns
    // unwind the newest steal episode first, which retraces the chain
    // through every worker holding saved results for the frame.

    fn newest(links: &[StealLink], frame: FrameId) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, l) in links.iter().enumerate() {
            if l.frame != frame {
                continue;
            }
            match best {
                Some(b) if links[b].at > l.at => {}
                _ => best = Some(i),
            }
        }
        best
    }

    pub fn open_victim_of(&self, frame: FrameId) -> Option<WorkerId> {
        Self::newest(&self.open_victims, frame).map(|i| self.open_victims[i].peer)
    }

    pub fn open_thief_of(&self, frame: FrameId) -> Option<WorkerId> {
        Self::newest(&self.open_thieves, frame).map(|i| self.open_thieves[i].peer)
    }

    pub fn remove_open_victim(&mut self, frame: FrameId) -> Option<StealLink> {
        let i = Self::newest(&self.open_victims, frame)?;
        Some(self.open_victims.remove(i))
    }

    pub fn remove_open_thief(&mut self, frame: FrameId) -> Option<StealLink> {
        let i = Self::newest(&self.open_thieves, frame)?;
        Some(self.open_thieves.remove(i))
    }

    /// Finds a locally present frame by id: current, pool, or held.
    pub fn find_frame_mut(&mut self, id: FrameId) -> Option<&mut Frame> {
        if let Some(cur) = self.current.as_mut() {
            if cur.id == id {
                return Some(cur);
            }
        }
        if let Some(f) = self.pool.iter_mut().find(|f| f.id == id) {
            return Some(f);
        }
        self.held.iter_mut().map(|h| &mut h.frame).find(|f| f.id == id)
    }

    pub fn holds_frame(&self, id: FrameId) -> bool {
        self.current.as_ref().map(|f| f.id == id).unwrap_or(false)
            || self.pool.iter().any(|f| f.id == id)
            || self.held.iter().any(|h| h.frame.id == id)
    }

    /// Whether a pending slot's result is expected to materialize at this
    /// worker (directly or through an absorbed identity).
    pub fn expects_locally(&self, expected_at: WorkerId) -> bool {
        expected_at == self.id || self.absorbed.contains(&expected_at)
    }

    /// Decides what should happen with a frame at a sync point (or after a
    /// slot fill while held).
    pub fn hold_status(&self, frame: &Frame) -> HoldStatus {
        let pending_mine = frame
            .pending_slots()
            .any(|(_, s)| self.expects_locally(s.expected_at));
        if pending_mine {
            return HoldStatus::WaitLocal;
        }
        if let Some(victim) = self.open_victim_of(frame.id) {
            return HoldStatus::ForwardTo(victim);
        }
        if frame.all_slots_filled() {
            HoldStatus::Resume
        } else {
            HoldStatus::WaitRemote
        }
    }

    /// Drains saved results that belong to the given frame into its slots.
    /// Returns how many were matched. A write to an already-filled slot is a
    /// protocol violation reported by the caller.
    pub fn match_saved_into(frame: &mut Frame, saved: &mut Vec<SavedResult>) -> Vec<SavedResult> {
        let mut matched = Vec::new();
        let mut i = 0;
        while i < saved.len() {
            if saved[i].parent == frame.id {
                let sr = saved.remove(i);
                frame.slots[sr.slot].value = Some(sr.value);
                matched.push(sr);
            } else {
                i += 1;
            }
        }
        matched
    }

    /// Applies buffered relocation notices to a frame now present here.
    pub fn apply_pending_relocs(frame: &mut Frame, pending: &mut Vec<PendingRelocation>) {
        let mut i = 0;
        while i < pending.len() {
            if pending[i].parent == frame.id {
                let r = pending.remove(i);
                if let Some(slot) = frame.slots.get_mut(r.slot) {
                    if slot.value.is_none() {
                        slot.expected_at = r.new_holder;
                    }
                }
            } else {
                i += 1;
            }
        }
    }

    /// Builds the checkpointable snapshot. The next-task descriptor is
    /// included iff `include_next` (checkpoint occasion 1).
    pub fn snapshot(&self, include_next: bool) -> WorkerSnapshot {
        WorkerSnapshot {
            pool: self.pool.iter().cloned().collect(),
            saved_results: self.saved_results.clone(),
            held: self.held.clone(),
            open_victims: self.open_victims.clone(),
            open_thieves: self.open_thieves.clone(),
            next_task: if include_next { self.current.clone() } else { None },
            absorbed: self.absorbed.clone(),
        }
    }

    /// Index of the first held frame that is ready to resume.
    pub fn resumable_held(&self) -> Option<usize> {
        self.held
            .iter()
            .position(|h| matches!(self.hold_status(&h.frame), HoldStatus::Resume))
    }

    /// All logical task paths represented anywhere in local custody.
    pub fn local_paths(&self) -> Vec<TaskPath> {
        let mut out = Vec::new();
        if let Some(c) = &self.current {
            out.push(c.path.clone());
        }
        out.extend(self.pool.iter().map(|f| f.path.clone()));
        out.extend(self.held.iter().map(|h| h.frame.path.clone()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{ParentRef, Slot};

    fn frame(id: u64, slots: Vec<(WorkerId, Option<i64>)>) -> Frame {
        Frame {
            id: FrameId { origin: 0, seq: id },
            program: "t".into(),
            args: vec![],
            section: 2,
            slots: slots
                .into_iter()
                .enumerate()
                .map(|(i, (w, v))| Slot {
                    child: FrameId { origin: 9, seq: i as u64 },
                    expected_at: w,
                    value: v,
                })
                .collect(),
            parent: ParentRef::Root,
            path: vec![],
        }
    }

    #[test]
    fn pool_is_fifo_for_steals_and_lifo_locally() {
        let mut w = WorkerState::new(0);
        w.pool.push_back(frame(1, vec![]));
        w.pool.push_back(frame(2, vec![]));
        w.pool.push_back(frame(3, vec![]));
        assert_eq!(w.extract_oldest().unwrap().id.seq, 1);
        assert_eq!(w.pop_local().unwrap().id.seq, 3);
        assert_eq!(w.pop_local().unwrap().id.seq, 2);
    }

    #[test]
    fn hold_status_waits_for_local_results_first() {
        let mut w = WorkerState::new(3);
        let f = frame(7, vec![(3, None), (5, None)]);
        assert_eq!(w.hold_status(&f), HoldStatus::WaitLocal);
        // Once the local slot fills, a stolen frame moves down the chain.
        let f2 = frame(7, vec![(3, Some(1)), (5, None)]);
        w.open_victims.push(StealLink { peer: 5, frame: f2.id });
        assert_eq!(w.hold_status(&f2), HoldStatus::ForwardTo(5));
    }

    #[test]
    fn hold_status_resume_and_wait_remote() {
        let w = WorkerState::new(3);
        let full = frame(7, vec![(3, Some(1))]);
        assert_eq!(w.hold_status(&full), HoldStatus::Resume);
        let remote = frame(8, vec![(4, None)]);
        assert_eq!(w.hold_status(&remote), HoldStatus::WaitRemote);
    }

    #[test]
    fn absorbed_identities_count_as_local() {
        let mut w = WorkerState::new(3);
        w.absorbed.insert(1);
        let f = frame(7, vec![(1, None)]);
        assert_eq!(w.hold_status(&f), HoldStatus::WaitLocal);
    }

    #[test]
    fn saved_results_match_by_parent_and_slot() {
        let mut f = frame(7, vec![(0, None), (0, None)]);
        let mut saved = vec![
            SavedResult {
                parent: f.id,
                slot: 1,
                child: FrameId { origin: 0, seq: 50 },
                value: 9,
                thief_expected_at: 2,
            },
            SavedResult {
                parent: FrameId { origin: 0, seq: 99 },
                slot: 0,
                child: FrameId { origin: 0, seq: 51 },
                value: 1,
                thief_expected_at: 2,
            },
        ];
        let matched = WorkerState::match_saved_into(&mut f, &mut saved);
        assert_eq!(matched.len(), 1);
        assert_eq!(f.slots[1].value, Some(9));
        assert_eq!(saved.len(), 1);
    }

    #[test]
    fn snapshot_includes_next_task_only_on_request() {
        let mut w = WorkerState::new(0);
        w.current = Some(frame(1, vec![]));
        assert!(w.snapshot(true).next_task.is_some());
        assert!(w.snapshot(false).next_task.is_none());
    }
}

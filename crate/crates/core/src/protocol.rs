//! Checkpoint occasions, the checkpoint timer policy, and the buddy ring.

use serde::{Deserialize, Serialize};

use std::collections::BTreeSet;

use crate::worker::WorkerId;

/// The two permitted instants for writing a checkpoint. Whichever comes
/// first applies; occasions never nest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointOccasion {
    /// About to branch into a child or a stolen task (or resume a frame);
    /// the snapshot includes the next-task descriptor.
    BeforeBranch,
    /// A task just finished and its result was incorporated or saved
    /// locally; no next-task descriptor.
    AfterFinish,
}

/// Why a checkpoint was written; protocol causes are mandatory, `Policy`
/// ones are gated by the task-count timer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointCause {
    Initial,
    Policy,
    StealVictim,
    StealThief,
    ReturnSender,
    ReturnReceipt,
    RecoveryMerge,
}

impl CheckpointCause {
    pub fn mandatory(self) -> bool {
        !matches!(self, CheckpointCause::Policy)
    }

    pub fn tag(self) -> &'static str {
        match self {
            CheckpointCause::Initial => "initial",
            CheckpointCause::Policy => "policy",
            CheckpointCause::StealVictim => "steal_victim",
            CheckpointCause::StealThief => "steal_thief",
            CheckpointCause::ReturnSender => "return_sender",
            CheckpointCause::ReturnReceipt => "return_receipt",
            CheckpointCause::RecoveryMerge => "recovery_merge",
        }
    }
}

/// Timer decision for a policy (non-mandatory) checkpoint occasion: write
/// when at least `period` tasks completed since the last write. Steals,
/// returns, and recovery merges checkpoint regardless of the timer.
pub fn timer_due(tasks_since_last: u32, period: u32) -> bool {
    tasks_since_last >= period.max(1)
}

/// The next worker alive in the ring of `p` workers, starting after
/// `worker`. A sole survivor is its own successor. Returns None when nothing
/// is alive.
pub fn buddy_of(worker: WorkerId, alive: &BTreeSet<WorkerId>, p: usize) -> Option<WorkerId> {
    if alive.is_empty() {
        return None;
    }
    for k in 1..=p {
        let cand = (worker + k) % p;
        if alive.contains(&cand) {
            return Some(cand);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[WorkerId]) -> BTreeSet<WorkerId> {
        ids.iter().copied().collect()
    }

    #[test]
    fn immediate_successor() {
        assert_eq!(buddy_of(2, &set(&[0, 1, 2, 3]), 4), Some(3));
    }

    #[test]
    fn wraparound() {
        assert_eq!(buddy_of(3, &set(&[0, 1, 3]), 4), Some(0));
    }

    #[test]
    fn sole_survivor_is_its_own_successor() {
        assert_eq!(buddy_of(1, &set(&[1]), 4), Some(1));
    }

    #[test]
    fn skips_dead_workers() {
        assert_eq!(buddy_of(0, &set(&[0, 3]), 4), Some(3));
    }

    #[test]
    fn empty_ring_is_none() {
        assert_eq!(buddy_of(0, &set(&[]), 4), None);
    }

    #[test]
    fn timer_gating() {
        assert!(!timer_due(0, 1));
        assert!(timer_due(1, 1));
        assert!(!timer_due(2, 3));
        assert!(timer_due(3, 3));
        // A period of zero behaves like one.
        assert!(timer_due(1, 0));
    }
}

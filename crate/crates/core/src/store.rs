//! Simulated replicated in-memory key-value store holding checkpoints and
//! transit records.
//!
//! The store is a single logical entity with linearizable operations (each
//! executes as one indivisible event inside a handler) and an injectable
//! failure that makes every subsequent operation error, aborting the run.
//! Adoption state (who claimed a failed worker's checkpoint, whether the
//! adoption completed, and the succession history) lives on the stored
//! checkpoint entry.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::StoreError;
use crate::program::Frame;
use crate::protocol::CheckpointOccasion;
use crate::worker::{WorkerId, WorkerSnapshot};

/// A worker's durable state snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub worker: WorkerId,
    pub seq: u64,
    pub occasion: CheckpointOccasion,
    pub state: WorkerSnapshot,
}

/// Stored checkpoint entry plus its recovery claim state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredCheckpoint {
    pub checkpoint: Checkpoint,
    /// Worker that claimed this (failed) worker's state for recovery.
    pub adopted_by: Option<WorkerId>,
    /// Set once the adopter has durably merged the state.
    pub adoption_complete: bool,
    /// Claimants in order; grows when a dead claimant is superseded.
    pub succession: Vec<WorkerId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransitKind {
    Loot,
    ReturnedFrame,
}

/// An in-flight frame parked durably while it moves between workers. Exists
/// from before its message is sent until the receiver (or an adopting buddy)
/// deletes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitRecord {
    pub transit_key: u64,
    pub kind: TransitKind,
    pub frame: Frame,
    pub from: WorkerId,
    pub to: WorkerId,
    pub claimed_by: Option<WorkerId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimOutcome {
    Claimed,
    AlreadyClaimed { by: WorkerId, complete: bool },
}

/// One logged store operation, for the optional JSON-lines dump.
#[derive(Debug, Clone, Serialize)]
pub struct StoreOpRecord {
    pub step: u64,
    pub op: &'static str,
    pub worker: Option<WorkerId>,
    pub seq: Option<u64>,
    pub key: Option<u64>,
}

#[derive(Debug)]
pub struct ResilientStore {
    checkpoints: BTreeMap<WorkerId, StoredCheckpoint>,
    transit: BTreeMap<u64, TransitRecord>,
    next_key: u64,
    root_result: Option<i64>,
    failed: bool,
    now: u64,
    pub ops_performed: u64,
    /// Store ops performed by the currently executing handler; the driver
    /// reads and resets this to charge simulated latency.
    pub ops_this_handler: u64,
    log_ops: bool,
    op_log: Vec<StoreOpRecord>,
}

impl ResilientStore {
    pub fn new(log_ops: bool) -> Self {
        ResilientStore {
            checkpoints: BTreeMap::new(),
            transit: BTreeMap::new(),
            next_key: 0,
            root_result: None,
            failed: false,
            now: 0,
            ops_performed: 0,
            ops_this_handler: 0,
            log_ops: false,
            op_log: Vec::new(),
        }
        .with_logging(log_ops)
    }

    fn with_logging(mut self, log_ops: bool) -> Self {
        self.log_ops = log_ops;
        self
    }

    pub fn set_now(&mut self, step: u64) {
        self.now = step;
    }

    /// Injects the store failure; all subsequent operations error.
    pub fn fail(&mut self) {
        self.failed = true;
    }

    pub fn has_failed(&self) -> bool {
        self.failed
    }

    fn op(
        &mut self,
        op: &'static str,
        worker: Option<WorkerId>,
        seq: Option<u64>,
        key: Option<u64>,
    ) -> Result<(), StoreError> {
        if self.failed {
            return Err(StoreError::StoreFailed);
        }
        self.ops_performed += 1;
        self.ops_this_handler += 1;
        if self.log_ops {
            self.op_log.push(StoreOpRecord { step: self.now, op, worker, seq, key });
        }
        Ok(())
    }

    pub fn op_log(&self) -> &[StoreOpRecord] {
        &self.op_log
    }

    pub fn next_transit_key(&mut self) -> u64 {
        self.next_key += 1;
        self.next_key
    }

    /// Writes a worker's checkpoint, replacing the previous one. The
    /// sequence number must be the successor of the stored one.
    pub fn put_checkpoint(&mut self, cp: Checkpoint) -> Result<(), StoreError> {
        self.op("put_checkpoint", Some(cp.worker), Some(cp.seq), None)?;
        self.validate_seq(&cp)?;
        self.apply_checkpoint(cp);
        Ok(())
    }

    fn validate_seq(&self, cp: &Checkpoint) -> Result<(), StoreError> {
        let have = self.checkpoints.get(&cp.worker).map(|s| s.checkpoint.seq);
        let expected = have.map(|s| s + 1).unwrap_or(0);
        if cp.seq != expected {
            return Err(StoreError::StaleSequence {
                worker: cp.worker,
                got: cp.seq,
                have: have.unwrap_or(0),
            });
        }
        Ok(())
    }

    fn apply_checkpoint(&mut self, cp: Checkpoint) {
        self.checkpoints.insert(
            cp.worker,
            StoredCheckpoint {
                checkpoint: cp,
                adopted_by: None,
                adoption_complete: false,
                succession: Vec::new(),
            },
        );
    }

    pub fn get_checkpoint(&mut self, worker: WorkerId) -> Result<Checkpoint, StoreError> {
        self.op("get_checkpoint", Some(worker), None, None)?;
        Ok(self
            .checkpoints
            .get(&worker)
            .expect("initial checkpoints are written for every worker at startup")
            .checkpoint
            .clone())
    }

    /// Victim-side steal commit: the checkpoint (with the loot removed) and
    /// the transit record carrying the loot apply atomically, or neither.
    pub fn atomic_steal_commit(
        &mut self,
        cp: Checkpoint,
        record: TransitRecord,
    ) -> Result<(), StoreError> {
        self.op("atomic_steal_commit", Some(cp.worker), Some(cp.seq), Some(record.transit_key))?;
        self.validate_seq(&cp)?;
        self.apply_checkpoint(cp);
        self.transit.insert(record.transit_key, record);
        Ok(())
    }

    /// Atomically claims a failed worker's checkpoint for recovery.
    pub fn claim_for_recovery(
        &mut self,
        failed: WorkerId,
        buddy: WorkerId,
    ) -> Result<ClaimOutcome, StoreError> {
        self.op("claim_for_recovery", Some(failed), None, None)?;
        let entry = self
            .checkpoints
            .get_mut(&failed)
            .expect("checkpoint exists for every worker");
        match entry.adopted_by {
            None => {
                entry.adopted_by = Some(buddy);
                entry.succession.push(buddy);
                Ok(ClaimOutcome::Claimed)
            }
            Some(by) => Ok(ClaimOutcome::AlreadyClaimed { by, complete: entry.adoption_complete }),
        }
    }

    /// Replaces a dead claimant, recording the succession.
    pub fn supersede_claim(
        &mut self,
        failed: WorkerId,
        buddy: WorkerId,
    ) -> Result<(), StoreError> {
        self.op("supersede_claim", Some(failed), None, None)?;
        let entry = self.checkpoints.get_mut(&failed).expect("checkpoint exists");
        entry.adopted_by = Some(buddy);
        entry.succession.push(buddy);
        Ok(())
    }

    /// Marks a claimed adoption as durably merged.
    pub fn complete_adoption(&mut self, failed: WorkerId) -> Result<(), StoreError> {
        self.op("complete_adoption", Some(failed), None, None)?;
        let entry = self.checkpoints.get_mut(&failed).expect("checkpoint exists");
        entry.adoption_complete = true;
        Ok(())
    }

    /// Adoption claim state of a worker's checkpoint, if any.
    pub fn adoption_of(&self, worker: WorkerId) -> Option<(WorkerId, bool)> {
        let e = self.checkpoints.get(&worker)?;
        e.adopted_by.map(|by| (by, e.adoption_complete))
    }

    pub fn succession_of(&self, worker: WorkerId) -> Vec<WorkerId> {
        self.checkpoints
            .get(&worker)
            .map(|e| e.succession.clone())
            .unwrap_or_default()
    }

    pub fn put_transit(&mut self, record: TransitRecord) -> Result<(), StoreError> {
        self.op("put_transit", Some(record.from), None, Some(record.transit_key))?;
        self.transit.insert(record.transit_key, record);
        Ok(())
    }

    /// Deletes a transit record. Idempotent: deleting a missing key is a
    /// no-op returning false.
    pub fn delete_transit(&mut self, key: u64) -> Result<bool, StoreError> {
        self.op("delete_transit", None, None, Some(key))?;
        Ok(self.transit.remove(&key).is_some())
    }

    pub fn get_transit(&mut self, key: u64) -> Result<Option<TransitRecord>, StoreError> {
        self.op("get_transit", None, None, Some(key))?;
        Ok(self.transit.get(&key).cloned())
    }

    /// All live records where the worker is sender or destination.
    pub fn scan_transit(&mut self, worker: WorkerId) -> Result<Vec<TransitRecord>, StoreError> {
        self.op("scan_transit", Some(worker), None, None)?;
        Ok(self
            .transit
            .values()
            .filter(|r| r.from == worker || r.to == worker)
            .cloned()
            .collect())
    }

    /// Re-addresses a parked record after its destination (or responsible
    /// sender) failed. Returns false if the record is gone.
    pub fn retarget_transit(
        &mut self,
        key: u64,
        new_from: WorkerId,
        new_to: WorkerId,
    ) -> Result<bool, StoreError> {
        self.op("retarget_transit", Some(new_from), None, Some(key))?;
        match self.transit.get_mut(&key) {
            Some(rec) => {
                rec.from = new_from;
                rec.to = new_to;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn mark_transit_claimed(&mut self, key: u64, by: WorkerId) -> Result<(), StoreError> {
        self.op("claim_transit", Some(by), None, Some(key))?;
        if let Some(rec) = self.transit.get_mut(&key) {
            rec.claimed_by = Some(by);
        }
        Ok(())
    }

    pub fn put_root_result(&mut self, value: i64) -> Result<(), StoreError> {
        self.op("put_root_result", None, None, None)?;
        self.root_result = Some(value);
        Ok(())
    }

    pub fn root_result(&self) -> Option<i64> {
        self.root_result
    }

    // Audit-side accessors; not store operations (no latency, no log).
    pub fn peek_checkpoint(&self, worker: WorkerId) -> Option<&StoredCheckpoint> {
        self.checkpoints.get(&worker)
    }

    pub fn peek_transit(&self) -> impl Iterator<Item = &TransitRecord> {
        self.transit.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worker::WorkerSnapshot;

    fn cp(worker: WorkerId, seq: u64) -> Checkpoint {
        Checkpoint {
            worker,
            seq,
            occasion: CheckpointOccasion::AfterFinish,
            state: WorkerSnapshot::default(),
        }
    }

    fn record(key: u64, from: WorkerId, to: WorkerId) -> TransitRecord {
        TransitRecord {
            transit_key: key,
            kind: TransitKind::Loot,
            frame: Frame::root("fib", vec![1], crate::program::FrameId { origin: from, seq: key }),
            from,
            to,
            claimed_by: None,
        }
    }

    #[test]
    fn checkpoint_sequence_rules() {
        let mut s = ResilientStore::new(false);
        s.put_checkpoint(cp(0, 0)).unwrap();
        s.put_checkpoint(cp(0, 1)).unwrap();
        assert_eq!(s.get_checkpoint(0).unwrap().seq, 1);
        // Replays and skips are both stale.
        assert!(matches!(
            s.put_checkpoint(cp(0, 1)),
            Err(StoreError::StaleSequence { got: 1, have: 1, .. })
        ));
        assert!(matches!(s.put_checkpoint(cp(0, 3)), Err(StoreError::StaleSequence { .. })));
        assert_eq!(s.get_checkpoint(0).unwrap().seq, 1);
    }

    #[test]
    fn latest_checkpoint_wins() {
        let mut s = ResilientStore::new(false);
        for seq in 0..=3 {
            s.put_checkpoint(cp(2, seq)).unwrap();
        }
        assert_eq!(s.get_checkpoint(2).unwrap().seq, 3);
    }

    #[test]
    fn claim_is_compare_and_set() {
        let mut s = ResilientStore::new(false);
        s.put_checkpoint(cp(1, 0)).unwrap();
        assert_eq!(s.claim_for_recovery(1, 2).unwrap(), ClaimOutcome::Claimed);
        assert_eq!(
            s.claim_for_recovery(1, 3).unwrap(),
            ClaimOutcome::AlreadyClaimed { by: 2, complete: false }
        );
        s.supersede_claim(1, 3).unwrap();
        assert_eq!(s.adoption_of(1), Some((3, false)));
        assert_eq!(s.succession_of(1), vec![2, 3]);
        s.complete_adoption(1).unwrap();
        assert_eq!(s.adoption_of(1), Some((3, true)));
    }

    #[test]
    fn transit_delete_is_idempotent() {
        let mut s = ResilientStore::new(false);
        s.put_transit(record(7, 0, 1)).unwrap();
        assert!(s.delete_transit(7).unwrap());
        assert!(!s.delete_transit(7).unwrap());
    }

    #[test]
    fn scan_finds_sender_and_destination() {
        let mut s = ResilientStore::new(false);
        s.put_transit(record(1, 0, 1)).unwrap();
        s.put_transit(record(2, 1, 2)).unwrap();
        s.put_transit(record(3, 2, 3)).unwrap();
        let hits = s.scan_transit(1).unwrap();
        assert_eq!(hits.len(), 2);
        assert!(s.scan_transit(9).unwrap().is_empty());
    }

    #[test]
    fn steal_commit_is_atomic_on_stale_sequence() {
        let mut s = ResilientStore::new(false);
        s.put_checkpoint(cp(0, 0)).unwrap();
        let err = s.atomic_steal_commit(cp(0, 5), record(9, 0, 1));
        assert!(matches!(err, Err(StoreError::StaleSequence { .. })));
        assert!(s.get_transit(9).unwrap().is_none());
        s.atomic_steal_commit(cp(0, 1), record(9, 0, 1)).unwrap();
        assert!(s.get_transit(9).unwrap().is_some());
        assert_eq!(s.get_checkpoint(0).unwrap().seq, 1);
    }

    #[test]
    fn failed_store_errors_every_operation() {
        let mut s = ResilientStore::new(false);
        s.put_checkpoint(cp(0, 0)).unwrap();
        s.fail();
        assert!(matches!(s.get_checkpoint(0), Err(StoreError::StoreFailed)));
        assert!(matches!(s.put_checkpoint(cp(0, 1)), Err(StoreError::StoreFailed)));
        assert!(matches!(s.scan_transit(0), Err(StoreError::StoreFailed)));
    }

    #[test]
    fn retarget_updates_endpoints_in_place() {
        let mut s = ResilientStore::new(false);
        s.put_transit(record(4, 0, 1)).unwrap();
        assert!(s.retarget_transit(4, 2, 3).unwrap());
        let r = s.get_transit(4).unwrap().unwrap();
        assert_eq!((r.from, r.to), (2, 3));
        assert!(!s.retarget_transit(99, 0, 1).unwrap());
    }
}

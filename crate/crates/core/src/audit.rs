//! Global frame-conservation auditor.
//!
//! Between events, every live logical task must be represented exactly once
//! across the authoritative holders: live workers' in-memory state, live
//! transit records, and checkpoints of dead workers whose adoption has not
//! completed. Checkpoints of live workers shadow their memory and staged
//! (uncommitted) recovery state shadows the still-authoritative checkpoint,
//! so both are excluded.

use std::collections::BTreeMap;

use crate::cluster::Cluster;
use crate::program::{Frame, FrameId, ParentRef, TaskPath};
use crate::worker::WorkerId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Holder {
    Worker(WorkerId),
    Transit(u64),
    DeadCheckpoint(WorkerId),
}

impl std::fmt::Display for Holder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Holder::Worker(w) => write!(f, "worker {w}"),
            Holder::Transit(k) => write!(f, "transit {k}"),
            Holder::DeadCheckpoint(w) => write!(f, "checkpoint of dead {w}"),
        }
    }
}

struct Rep {
    frame: Frame,
    holder: Holder,
}

/// Sweeps the whole simulated world and reports conservation violations.
pub fn audit_conservation(cluster: &Cluster) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut reps: Vec<Rep> = Vec::new();
    let mut saved: Vec<(FrameId, usize, Holder)> = Vec::new();

    for w in 0..cluster.p() {
        if !cluster.is_alive(w) {
            continue;
        }
        let ws = cluster.worker(w);
        let holder = Holder::Worker(w);
        if let Some(c) = &ws.current {
            reps.push(Rep { frame: c.clone(), holder });
        }
        for f in ws.pool.iter() {
            reps.push(Rep { frame: f.clone(), holder });
        }
        for h in ws.held.iter() {
            reps.push(Rep { frame: h.frame.clone(), holder });
        }
        for sr in ws.saved_results.iter() {
            saved.push((sr.parent, sr.slot, holder));
        }
    }

    for rec in cluster.store.peek_transit() {
        reps.push(Rep { frame: rec.frame.clone(), holder: Holder::Transit(rec.transit_key) });
    }

    for w in 0..cluster.p() {
        if cluster.is_alive(w) {
            continue;
        }
        let Some(stored) = cluster.store.peek_checkpoint(w) else { continue };
        if stored.adoption_complete {
            continue;
        }
        let holder = Holder::DeadCheckpoint(w);
        let st = &stored.checkpoint.state;
        for f in st.pool.iter() {
            reps.push(Rep { frame: f.clone(), holder });
        }
        for h in st.held.iter() {
            reps.push(Rep { frame: h.frame.clone(), holder });
        }
        if let Some(n) = &st.next_task {
            reps.push(Rep { frame: n.clone(), holder });
        }
        for sr in st.saved_results.iter() {
            saved.push((sr.parent, sr.slot, holder));
        }
    }

    // Uniqueness by frame id and by logical path.
    let mut by_id: BTreeMap<FrameId, Vec<Holder>> = BTreeMap::new();
    let mut by_path: BTreeMap<TaskPath, Vec<(FrameId, Holder)>> = BTreeMap::new();
    for r in reps.iter() {
        by_id.entry(r.frame.id).or_default().push(r.holder);
        by_path.entry(r.frame.path.clone()).or_default().push((r.frame.id, r.holder));
    }
    for (id, holders) in by_id.iter() {
        if holders.len() > 1 {
            violations.push(Violation {
                kind: "duplicate-frame",
                detail: format!(
                    "frame {id} held by {}",
                    holders.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(", ")
                ),
            });
        }
    }
    for (path, frames) in by_path.iter() {
        if frames.len() > 1 {
            violations.push(Violation {
                kind: "duplicate-task",
                detail: format!(
                    "logical task {path:?} represented by {}",
                    frames
                        .iter()
                        .map(|(id, h)| format!("{id} at {h}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            });
        }
    }

    // Pending-slot coverage: each awaited child is represented exactly once,
    // either as a live frame or as a saved result.
    for r in reps.iter() {
        for (idx, slot) in r.frame.pending_slots() {
            let frame_reps = by_id.get(&slot.child).map(|v| v.len()).unwrap_or(0);
            let saved_reps = saved
                .iter()
                .filter(|(p, s, _)| *p == r.frame.id && *s == idx)
                .count();
            let total = frame_reps + saved_reps;
            if total == 0 {
                violations.push(Violation {
                    kind: "lost-child",
                    detail: format!(
                        "frame {} slot {idx} awaits child {} with no representation",
                        r.frame.id, slot.child
                    ),
                });
            } else if total > 1 {
                violations.push(Violation {
                    kind: "duplicated-child",
                    detail: format!(
                        "frame {} slot {idx} child {} has {total} representations",
                        r.frame.id, slot.child
                    ),
                });
            }
        }
    }

    // Orphans: every non-root frame must be awaited by its parent.
    for r in reps.iter() {
        if let ParentRef::Parent { frame: pid, slot, .. } = r.frame.parent {
            let parent = reps.iter().find(|p| p.frame.id == pid);
            match parent {
                None => violations.push(Violation {
                    kind: "orphan-frame",
                    detail: format!("frame {} at {} has no parent {pid}", r.frame.id, r.holder),
                }),
                Some(p) => {
                    let ok = p
                        .frame
                        .slots
                        .get(slot)
                        .map(|s| s.child == r.frame.id && s.value.is_none())
                        .unwrap_or(false);
                    if !ok {
                        violations.push(Violation {
                            kind: "orphan-frame",
                            detail: format!(
                                "frame {} not awaited by parent {pid} slot {slot}",
                                r.frame.id
                            ),
                        });
                    }
                }
            }
        }
    }

    // Dangling saved results: the parent frame must exist somewhere.
    for (parent, slot, holder) in saved.iter() {
        if by_id.get(parent).is_none() {
            violations.push(Violation {
                kind: "dangling-saved-result",
                detail: format!("saved result for ({parent}, {slot}) at {holder} has no frame"),
            });
        }
    }

    violations
}

/// Failure-free structural check: a worker's pool holds only ancestors of
/// its current task, oldest outermost.
pub fn check_workfirst_shape(cluster: &Cluster) -> Vec<Violation> {
    let mut violations = Vec::new();
    for w in 0..cluster.p() {
        if !cluster.is_alive(w) {
            continue;
        }
        let ws = cluster.worker(w);
        let mut chain: Vec<&TaskPath> = ws.pool.iter().map(|f| &f.path).collect();
        let current_path = ws.current.as_ref().map(|c| &c.path);
        if let Some(p) = current_path {
            chain.push(p);
        }
        for pair in chain.windows(2) {
            let (older, younger) = (pair[0], pair[1]);
            if younger.len() <= older.len() || &younger[..older.len()] != older.as_slice() {
                violations.push(Violation {
                    kind: "pool-shape",
                    detail: format!(
                        "worker {w}: {older:?} is not an ancestor of younger {younger:?}"
                    ),
                });
            }
        }
    }
    violations
}

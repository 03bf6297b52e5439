//! Event trace collection: one JSON-serializable entry per event, stable
//! across runs for byte-identical determinism comparisons.

use serde::Serialize;
use serde_json::{json, Value};

use crate::program::{FrameId, TaskPath};
use crate::protocol::{CheckpointCause, CheckpointOccasion};
use crate::worker::WorkerId;

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: u64,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worker: Option<WorkerId>,
    pub detail: Value,
}

/// Trace kinds that only occur while handling a failure. Used by the
/// localization check: these may appear only at the buddy, at relocation
/// targets, and at senders rerouting a parked record.
pub const RECOVERY_KINDS: &[&str] = &[
    "claim",
    "supersede",
    "adopt_state",
    "adopt_transit",
    "recover",
    "reloc",
    "reloc_apply",
    "retarget",
];

#[derive(Debug, Default)]
pub struct Trace {
    pub enabled: bool,
    pub events: Vec<TraceEvent>,
    step: u64,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Trace { enabled, events: Vec::new(), step: 0 }
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn push(&mut self, kind: &str, worker: Option<WorkerId>, detail: Value) {
        if !self.enabled {
            return;
        }
        self.events.push(TraceEvent { step: self.step, kind: kind.to_string(), worker, detail });
    }

    pub fn ckpt(
        &mut self,
        worker: WorkerId,
        seq: u64,
        occasion: CheckpointOccasion,
        cause: CheckpointCause,
    ) {
        self.push(
            "ckpt",
            Some(worker),
            json!({
                "seq": seq,
                "occasion": match occasion {
                    CheckpointOccasion::BeforeBranch => "before_branch",
                    CheckpointOccasion::AfterFinish => "after_finish",
                },
                "cause": cause.tag(),
            }),
        );
    }

    pub fn steal(&mut self, victim: WorkerId, thief: WorkerId, frame: FrameId, key: u64) {
        self.push(
            "steal",
            Some(victim),
            json!({"thief": thief, "frame": frame.to_string(), "key": key}),
        );
    }

    pub fn frame_return(&mut self, thief: WorkerId, victim: WorkerId, frame: FrameId, key: u64) {
        self.push(
            "return",
            Some(thief),
            json!({"victim": victim, "frame": frame.to_string(), "key": key}),
        );
    }

    pub fn transit(&mut self, op: &str, kind: &str, key: u64, worker: WorkerId) {
        self.push("transit", Some(worker), json!({"op": op, "kind": kind, "key": key}));
    }

    pub fn task_done(&mut self, worker: WorkerId, path: &TaskPath, value: i64) {
        self.push("task_done", Some(worker), json!({"path": path, "value": value}));
    }

    pub fn saved(&mut self, worker: WorkerId, parent: FrameId, thief: WorkerId) {
        self.push(
            "saved",
            Some(worker),
            json!({"parent": parent.to_string(), "thief": thief}),
        );
    }

    pub fn reloc(
        &mut self,
        from: WorkerId,
        to: WorkerId,
        child: FrameId,
        original_thief: WorkerId,
    ) {
        self.push(
            "reloc",
            Some(from),
            json!({"to": to, "child": child.to_string(), "original_thief": original_thief}),
        );
    }

    pub fn recover(&mut self, buddy: WorkerId, failed: WorkerId, detail: Value) {
        self.push("recover", Some(buddy), json!({"failed": failed, "summary": detail}));
    }
}

/// Renders a trace as JSON lines.
pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

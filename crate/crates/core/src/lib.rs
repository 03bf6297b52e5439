//! Library and simulator for checkpointing and localized shrinking recovery
//! of nested fork-join programs under work-first distributed work stealing.
//!
//! Programs are section-structured resumable step functions whose activation
//! records (frames) are first-class data: they live in per-worker pools, are
//! stolen as loot, returned at syncs for result matching, checkpointed to a
//! resilient store, and adopted by ring buddies when a worker fails. The
//! discrete-event simulator injects deterministic fail-stop failures so that
//! correctness under arbitrary failure schedules is checked mechanically
//! against a sequential oracle.

pub mod audit;
pub mod cluster;
pub mod error;
pub mod program;
pub mod protocol;
pub mod sim;
pub mod store;
pub mod trace;
pub mod worker;

pub use cluster::{Cluster, Effects, Envelope, Metrics, SimConfig};
pub use error::{AbortReason, ProgramError, StoreError};
pub use program::{
    builtin_programs, fib_program, parse_program, sequential_execute, step_frame, tree_program,
    Action, Frame, FrameId, ParentRef, ProgramSpec, Slot, TaskPath,
};
pub use protocol::{buddy_of, CheckpointCause, CheckpointOccasion};
pub use sim::{
    check_single_failure_run, exhaustive_single_failure_sweep, random_failure_plan,
    run_simulation, FailurePlan, PlanEntry, RunResult, SimReport, SweepRow, Trigger, VictimSpec,
};
pub use store::{Checkpoint, ResilientStore, TransitKind, TransitRecord};
pub use worker::{HeldFrame, Message, SavedResult, StealLink, WorkerId, WorkerState};

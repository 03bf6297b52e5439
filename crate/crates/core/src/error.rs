//! Error and abort types shared across the simulator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::worker::WorkerId;

/// Errors raised by the program model (step functions, parsing, the
/// sequential executor).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgramError {
    #[error("unknown program: {0}")]
    UnknownProgram(String),
    #[error("invalid section {section} for program {program}")]
    InvalidSection { program: String, section: u32 },
    #[error("step budget of {0} exceeded")]
    StepBudgetExceeded(u64),
    #[error("malformed program spec string: {0}")]
    ParseError(String),
}

/// Errors raised by the resilient store.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    /// A checkpoint write whose sequence number is not the successor of the
    /// stored one. Signals a protocol bug; the run halts.
    #[error("stale checkpoint sequence for worker {worker}: got {got}, have {have}")]
    StaleSequence { worker: WorkerId, got: u64, have: u64 },
    /// The store itself has failed; the run aborts.
    #[error("resilient store failed")]
    StoreFailed,
}

/// Terminal outcomes other than a computed result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbortReason {
    /// The resilient store failed mid-run.
    StoreFailed,
    /// Every worker has been killed; nothing can finish the computation.
    AllWorkersFailed,
    /// The event budget ran out or the system went quiescent without a
    /// result. Carries a diagnostic dump.
    StepBudgetExceeded { diagnostics: String },
    /// An internal invariant was violated (double slot write, stale state).
    ProtocolViolation { detail: String },
    /// The conservation auditor found a violation while auditing was on.
    AuditViolation { detail: String },
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AbortReason::StoreFailed => write!(f, "StoreFailed"),
            AbortReason::AllWorkersFailed => write!(f, "AllWorkersFailed"),
            AbortReason::StepBudgetExceeded { diagnostics } => {
                write!(f, "StepBudgetExceeded: {diagnostics}")
            }
            AbortReason::ProtocolViolation { detail } => {
                write!(f, "ProtocolViolation: {detail}")
            }
            AbortReason::AuditViolation { detail } => write!(f, "AuditViolation: {detail}"),
        }
    }
}

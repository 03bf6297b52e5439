//! Nested fork-join programs as resumable, section-structured step
//! functions, plus the sequential oracle executor.
//!
//! A task is an activation of a program on a list of integer arguments. Its
//! activation record is a [`Frame`]: arguments, a section counter, and
//! ordered child-result slots. The step function maps a frame to the next
//! [`Action`] and is a pure function of the frame contents, so frames can be
//! checkpointed, shipped between workers, and re-executed freely.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::ProgramError;
use crate::worker::WorkerId;

/// Globally unique frame identity: the worker that minted it plus a local
/// counter. Re-executed tasks spawned anew get fresh ids; frames restored
/// from checkpoints keep theirs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameId {
    pub origin: WorkerId,
    pub seq: u64,
}

impl std::fmt::Display for FrameId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "w{}#{}", self.origin, self.seq)
    }
}

/// Logical task identity: the child-index path from the root. Independent of
/// frame ids, so re-executions of the same task share a path.
pub type TaskPath = Vec<u32>;

/// One child-result slot of a frame. Slots are appended in spawn order, so
/// result matching is position-exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    /// Frame id of the child whose result belongs here.
    pub child: FrameId,
    /// Worker where the result is expected to materialize (the worker that
    /// executed the spawn; updated by relocation during recovery).
    pub expected_at: WorkerId,
    pub value: Option<i64>,
}

/// Locator of the frame awaiting this task's result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParentRef {
    Root,
    Parent {
        frame: FrameId,
        slot: usize,
        /// Worker the parent frame lived on at spawn time.
        home: WorkerId,
    },
}

/// A task activation record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub id: FrameId,
    pub program: String,
    pub args: Vec<i64>,
    pub section: u32,
    pub slots: Vec<Slot>,
    pub parent: ParentRef,
    pub path: TaskPath,
}

impl Frame {
    pub fn root(program: &str, args: Vec<i64>, id: FrameId) -> Self {
        Frame {
            id,
            program: program.to_string(),
            args,
            section: 0,
            slots: Vec::new(),
            parent: ParentRef::Root,
            path: Vec::new(),
        }
    }

    pub fn all_slots_filled(&self) -> bool {
        self.slots.iter().all(|s| s.value.is_some())
    }

    pub fn pending_slots(&self) -> impl Iterator<Item = (usize, &Slot)> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.value.is_none())
    }
}

/// Next transition of a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Spawn a child with the given arguments; the frame continues at
    /// `continuation` once the child is branched into.
    Spawn { args: Vec<i64>, continuation: u32 },
    /// Wait for all child slots; advance to `continuation` once filled.
    Sync { continuation: u32 },
    Return(i64),
}

type StepFn = Arc<dyn Fn(&Frame) -> Result<Action, ProgramError> + Send + Sync>;

/// A nested fork-join program: a symbolic id and a pure step function over
/// frames. `section_cost` stretches simulated time per executed section.
#[derive(Clone)]
pub struct ProgramSpec {
    pub id: String,
    pub description: String,
    /// Number of sequential sections of the largest task shape.
    pub sections: u32,
    pub section_cost: u64,
    step: StepFn,
}

impl std::fmt::Debug for ProgramSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProgramSpec")
            .field("id", &self.id)
            .field("sections", &self.sections)
            .field("section_cost", &self.section_cost)
            .finish()
    }
}

impl ProgramSpec {
    pub fn new(
        id: impl Into<String>,
        description: impl Into<String>,
        sections: u32,
        section_cost: u64,
        step: impl Fn(&Frame) -> Result<Action, ProgramError> + Send + Sync + 'static,
    ) -> Self {
        ProgramSpec {
            id: id.into(),
            description: description.into(),
            sections,
            section_cost,
            step: Arc::new(step),
        }
    }

    /// A program whose task tree is given explicitly: `counts` maps a task's
    /// argument vector (its own path) to its child count. Each task returns
    /// 1 plus the sum of its children, i.e. its subtree size.
    pub fn shaped(id: impl Into<String>, counts: BTreeMap<Vec<i64>, u32>) -> Self {
        let id = id.into();
        let max_children = counts.values().copied().max().unwrap_or(0);
        let pid = id.clone();
        ProgramSpec::new(
            id,
            "explicit-shape tree; value = subtree size",
            max_children + 2,
            1,
            move |frame| {
                let c = counts.get(&frame.args).copied().unwrap_or(0);
                step_counting_tree(&pid, frame, c, |args, i| {
                    let mut child = args.to_vec();
                    child.push(i as i64);
                    child
                })
            },
        )
    }
}

/// Shared section logic for tree-shaped counting programs: sections
/// `0..children` spawn, section `children` syncs, the final section returns
/// `1 + sum(slots)`. A leaf returns 1 at section 0.
fn step_counting_tree(
    pid: &str,
    frame: &Frame,
    children: u32,
    child_args: impl Fn(&[i64], u32) -> Vec<i64>,
) -> Result<Action, ProgramError> {
    let s = frame.section;
    if children == 0 {
        return if s == 0 {
            Ok(Action::Return(1))
        } else {
            Err(ProgramError::InvalidSection {
                program: pid.to_string(),
                section: s,
            })
        };
    }
    if s < children {
        Ok(Action::Spawn {
            args: child_args(&frame.args, s),
            continuation: s + 1,
        })
    } else if s == children {
        Ok(Action::Sync { continuation: s + 1 })
    } else if s == children + 1 {
        let sum: i64 = frame.slots.iter().map(|sl| sl.value.unwrap_or(0)).sum();
        Ok(Action::Return(1 + sum))
    } else {
        Err(ProgramError::InvalidSection {
            program: pid.to_string(),
            section: s,
        })
    }
}

/// The classic recursive Fibonacci program. Sections: 0 = test and first
/// spawn, 1 = second spawn, 2 = sync, 3 = add and return.
pub fn fib_program() -> ProgramSpec {
    ProgramSpec::new("fib", "recursive fibonacci", 4, 1, |frame| {
        let n = frame.args[0];
        match frame.section {
            0 => {
                if n < 2 {
                    Ok(Action::Return(n))
                } else {
                    Ok(Action::Spawn { args: vec![n - 1], continuation: 1 })
                }
            }
            1 => Ok(Action::Spawn { args: vec![n - 2], continuation: 2 }),
            2 => Ok(Action::Sync { continuation: 3 }),
            3 => {
                let x = frame.slots[0].value.unwrap_or(0);
                let y = frame.slots[1].value.unwrap_or(0);
                Ok(Action::Return(x + y))
            }
            s => Err(ProgramError::InvalidSection { program: "fib".into(), section: s }),
        }
    })
}

/// A uniform synthetic tree: every task above depth zero spawns `branching`
/// children, a task's argument is its remaining depth, and each task returns
/// its subtree size. `cost` is the simulated step cost per section.
pub fn tree_program(branching: u32, cost: u64) -> ProgramSpec {
    let id = format!("tree{branching}");
    let pid = id.clone();
    ProgramSpec::new(
        id,
        "uniform synthetic tree; value = subtree size",
        branching + 2,
        cost.max(1),
        move |frame| {
            let remaining = frame.args[0];
            let children = if remaining <= 0 { 0 } else { branching };
            step_counting_tree(&pid, frame, children, |args, _| vec![args[0] - 1])
        },
    )
}

/// Representative instances of the shipped programs.
pub fn builtin_programs() -> Vec<ProgramSpec> {
    vec![fib_program(), tree_program(2, 1)]
}

/// Parses a CLI program selection string: `fib:<n>` or
/// `tree:<branching>,<depth>[,<cost>]`. Returns the program plus root args.
pub fn parse_program(spec: &str) -> Result<(ProgramSpec, Vec<i64>), ProgramError> {
    let (name, rest) = spec
        .split_once(':')
        .ok_or_else(|| ProgramError::ParseError(format!("expected <name>:<args>, got `{spec}`")))?;
    match name {
        "fib" => {
            let n: i64 = rest
                .parse()
                .map_err(|_| ProgramError::ParseError(format!("bad fib argument `{rest}`")))?;
            Ok((fib_program(), vec![n]))
        }
        "tree" => {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() < 2 || parts.len() > 3 {
                return Err(ProgramError::ParseError(format!(
                    "tree takes <branching>,<depth>[,<cost>], got `{rest}`"
                )));
            }
            let b: u32 = parts[0]
                .parse()
                .map_err(|_| ProgramError::ParseError(format!("bad branching `{}`", parts[0])))?;
            let d: i64 = parts[1]
                .parse()
                .map_err(|_| ProgramError::ParseError(format!("bad depth `{}`", parts[1])))?;
            let cost: u64 = if parts.len() == 3 {
                parts[2]
                    .parse()
                    .map_err(|_| ProgramError::ParseError(format!("bad cost `{}`", parts[2])))?
            } else {
                1
            };
            if b == 0 {
                return Err(ProgramError::ParseError("branching must be >= 1".into()));
            }
            Ok((tree_program(b, cost), vec![d]))
        }
        other => Err(ProgramError::UnknownProgram(other.to_string())),
    }
}

/// Runs the program's step function on a frame. Pure: the input frame is not
/// mutated; the caller applies the transition.
pub fn step_frame(frame: &Frame, program: &ProgramSpec) -> Result<Action, ProgramError> {
    if frame.program != program.id {
        return Err(ProgramError::UnknownProgram(frame.program.clone()));
    }
    (program.step)(frame)
}

/// Outcome of a sequential run: the result value, the task count, and the
/// depth-first completion order of logical task paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequentialRun {
    pub value: i64,
    pub tasks: u64,
    pub completion_order: Vec<TaskPath>,
}

/// Single-worker depth-first execution; the ground truth every simulator run
/// is checked against.
pub fn sequential_execute(
    program: &ProgramSpec,
    root_args: &[i64],
    step_budget: u64,
) -> Result<SequentialRun, ProgramError> {
    let mut next_id = 0u64;
    let mut mint = |origin: WorkerId| {
        next_id += 1;
        FrameId { origin, seq: next_id }
    };
    let mut stack = vec![Frame::root(&program.id, root_args.to_vec(), mint(0))];
    let mut steps = 0u64;
    let mut tasks = 0u64;
    let mut order = Vec::new();
    loop {
        steps += 1;
        if steps > step_budget {
            return Err(ProgramError::StepBudgetExceeded(step_budget));
        }
        let top = stack.last_mut().expect("non-empty stack");
        match step_frame(top, program)? {
            Action::Spawn { args, continuation } => {
                let slot = top.slots.len();
                let id = mint(0);
                top.section = continuation;
                top.slots.push(Slot { child: id, expected_at: 0, value: None });
                let mut path = top.path.clone();
                path.push(slot as u32);
                let parent = ParentRef::Parent { frame: top.id, slot, home: 0 };
                let child = Frame {
                    id,
                    program: program.id.clone(),
                    args,
                    section: 0,
                    slots: Vec::new(),
                    parent,
                    path,
                };
                stack.push(child);
            }
            Action::Sync { continuation } => {
                debug_assert!(top.all_slots_filled(), "sequential sync can never block");
                top.section = continuation;
            }
            Action::Return(v) => {
                let done = stack.pop().expect("frame present");
                tasks += 1;
                order.push(done.path);
                match done.parent {
                    ParentRef::Root => {
                        return Ok(SequentialRun { value: v, tasks, completion_order: order })
                    }
                    ParentRef::Parent { slot, .. } => {
                        let parent = stack.last_mut().expect("parent on stack");
                        parent.slots[slot].value = Some(v);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_at(program: &str, args: Vec<i64>, section: u32, slots: Vec<Option<i64>>) -> Frame {
        let mut f = Frame::root(program, args, FrameId { origin: 0, seq: 1 });
        f.section = section;
        f.slots = slots
            .into_iter()
            .enumerate()
            .map(|(i, v)| Slot {
                child: FrameId { origin: 0, seq: 100 + i as u64 },
                expected_at: 0,
                value: v,
            })
            .collect();
        f
    }

    fn iterative_fib(n: i64) -> i64 {
        let (mut a, mut b) = (0i64, 1i64);
        for _ in 0..n {
            let t = a + b;
            a = b;
            b = t;
        }
        a
    }

    #[test]
    fn fib_base_case_returns_argument() {
        let p = fib_program();
        let f = frame_at("fib", vec![1], 0, vec![]);
        assert_eq!(step_frame(&f, &p).unwrap(), Action::Return(1));
    }

    #[test]
    fn fib_first_spawn() {
        let p = fib_program();
        let f = frame_at("fib", vec![5], 0, vec![]);
        assert_eq!(
            step_frame(&f, &p).unwrap(),
            Action::Spawn { args: vec![4], continuation: 1 }
        );
    }

    #[test]
    fn fib_final_section_adds_slots() {
        let p = fib_program();
        let f = frame_at("fib", vec![5], 3, vec![Some(3), Some(2)]);
        assert_eq!(step_frame(&f, &p).unwrap(), Action::Return(5));
    }

    #[test]
    fn fib_invalid_section_is_rejected() {
        let p = fib_program();
        let f = frame_at("fib", vec![5], 9, vec![]);
        assert!(matches!(
            step_frame(&f, &p),
            Err(ProgramError::InvalidSection { section: 9, .. })
        ));
    }

    #[test]
    fn program_mismatch_is_unknown_program() {
        let p = fib_program();
        let f = frame_at("nope", vec![1], 0, vec![]);
        assert!(matches!(step_frame(&f, &p), Err(ProgramError::UnknownProgram(_))));
    }

    #[test]
    fn sequential_fib_small_values() {
        let p = fib_program();
        assert_eq!(sequential_execute(&p, &[0], 100).unwrap().value, 0);
        assert_eq!(sequential_execute(&p, &[10], 10_000).unwrap().value, 55);
    }

    #[test]
    fn sequential_fib_matches_iterative_up_to_25() {
        let p = fib_program();
        for n in 0..=25 {
            let run = sequential_execute(&p, &[n], 50_000_000).unwrap();
            assert_eq!(run.value, iterative_fib(n), "fib({n})");
        }
    }

    #[test]
    fn sequential_fib_task_count() {
        // C(n) = C(n-1) + C(n-2) + 1, C(0) = C(1) = 1.
        let mut c = vec![1u64, 1];
        for n in 2..=10 {
            let v = c[n - 1] + c[n - 2] + 1;
            c.push(v);
        }
        let p = fib_program();
        let run = sequential_execute(&p, &[10], 100_000).unwrap();
        assert_eq!(run.tasks, c[10]);
        assert_eq!(run.tasks, 177);
    }

    #[test]
    fn sequential_budget_guard() {
        let p = fib_program();
        assert!(matches!(
            sequential_execute(&p, &[20], 10),
            Err(ProgramError::StepBudgetExceeded(10))
        ));
    }

    #[test]
    fn tree_task_count_is_full_tree_size() {
        let (p, args) = parse_program("tree:2,3").unwrap();
        let run = sequential_execute(&p, &args, 10_000).unwrap();
        assert_eq!(run.tasks, 15);
        assert_eq!(run.value, 15);
    }

    #[test]
    fn fib_has_four_sections() {
        assert_eq!(fib_program().sections, 4);
    }

    #[test]
    fn parse_rejects_unknown_and_malformed() {
        assert!(matches!(parse_program("unknown:3"), Err(ProgramError::UnknownProgram(_))));
        assert!(matches!(parse_program("fib"), Err(ProgramError::ParseError(_))));
        assert!(matches!(parse_program("tree:2"), Err(ProgramError::ParseError(_))));
        assert!(matches!(parse_program("fib:x"), Err(ProgramError::ParseError(_))));
    }

    #[test]
    fn step_is_pure() {
        let p = fib_program();
        let f = frame_at("fib", vec![7], 0, vec![]);
        let before = f.clone();
        let a1 = step_frame(&f, &p).unwrap();
        let a2 = step_frame(&f, &p).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(f, before);
    }

    #[test]
    fn oracle_is_deterministic() {
        let p = fib_program();
        let a = sequential_execute(&p, &[12], 100_000).unwrap();
        let b = sequential_execute(&p, &[12], 100_000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shaped_program_counts_nodes() {
        let mut counts = BTreeMap::new();
        counts.insert(vec![], 2u32);
        counts.insert(vec![0], 1);
        counts.insert(vec![0, 0], 0);
        counts.insert(vec![1], 0);
        let p = ProgramSpec::shaped("shape", counts);
        let run = sequential_execute(&p, &[], 1_000).unwrap();
        assert_eq!(run.value, 4);
        assert_eq!(run.tasks, 4);
    }
}

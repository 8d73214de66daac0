//! Path exploration: run a deterministic world, fork it at every
//! multi-way choice, and keep going until every reachable path has
//! terminated or a resource limit fires.
//!
//! The engine knows nothing about protocols. It owns three things:
//!
//! - a [`ConstraintStore`](crate::symval::ConstraintStore) per path,
//! - the choice trace that makes a path replayable, and
//! - the frontier of execution states still to be advanced.
//!
//! Worlds implement [`World`] and interact with the engine only
//! through [`StepCtx`]: fresh symbolic bytes, branch decisions, packet
//! drop decisions, concretizations, and coverage probes. Because a
//! `step` is an ordinary Rust call, the engine cannot pause it halfway
//! at a fork. Instead it snapshots the world before every step and,
//! when a step hits a genuinely multi-way choice, aborts the attempt
//! and re-runs the step once per option with the chosen record queued
//! up. Choices with a single feasible option are taken inline without
//! aborting, so the re-run tax is paid only at real forks.

mod ctx;
mod demo;
mod engine;
mod record;

pub use ctx::{Interrupt, StepCtx, StepStatus, World};
pub use demo::{run_branch_demo, DemoPath};
pub use engine::{
    explore, replay_path, run_scripted, EngineError, ExploreOutcome, Limits, PathResult,
    ReplayError, ScriptStep, StopReason, Strategy,
};
pub use record::{
    Choice, ChoiceRecord, DropDecision, FaultKind, FaultSignature, Party, PathStatus, TestCase,
    TestCaseError,
};

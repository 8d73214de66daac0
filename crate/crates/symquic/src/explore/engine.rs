//! The exploration loop: frontier management, forking, limits, and
//! replay.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::explore::ctx::{CtxMode, StepCtx, StepStatus, World};
use crate::explore::record::{ChoiceRecord, DropDecision, FaultSignature, PathStatus};
use crate::explore::Interrupt;
use crate::symval::ConstraintStore;

/// Order in which frontier states are advanced.
///
/// Children of a fork enter the frontier in option-declaration order
/// (true before false, delivered before dropped), so DFS, which always
/// takes the newest state, descends into the last-declared option
/// first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    #[default]
    Dfs,
    Bfs,
    /// Uniform random choice from the frontier, deterministic for a
    /// given seed: selection `i` draws from a generator seeded with
    /// `seed + i`.
    RandomSeeded(u64),
}

/// Resource bounds for one exploration.
#[derive(Debug, Clone)]
pub struct Limits {
    /// Stop once this many paths have terminated.
    pub max_paths: usize,
    /// Cut off any single path after this many committed steps.
    pub max_steps_per_path: u64,
    /// Stop the whole exploration after this much wall time.
    pub time_limit: Option<Duration>,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_paths: 100_000,
            max_steps_per_path: 100_000,
            time_limit: None,
        }
    }
}

/// Why the exploration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    FrontierExhausted,
    MaxPathsReached,
    TimeLimit,
}

/// One terminated path.
#[derive(Debug, Clone)]
pub struct PathResult {
    pub state_id: u64,
    pub parent_id: Option<u64>,
    pub status: PathStatus,
    pub trace: Vec<ChoiceRecord>,
    /// Final constraint store; witnesses and constraint summaries are
    /// derived from it.
    pub store: ConstraintStore,
    /// The terminal world, serialized. Diagnostics and tests inspect
    /// endpoint state through this without the engine knowing the
    /// world's type.
    pub final_world: serde_json::Value,
    pub coverage: BTreeSet<String>,
    pub step_count: u64,
}

impl PathResult {
    pub fn witnesses(&self) -> BTreeMap<u32, u8> {
        self.store.witnesses()
    }
}

/// Everything an exploration produced.
#[derive(Debug)]
pub struct ExploreOutcome {
    /// Terminated paths in the order they finished.
    pub paths: Vec<PathResult>,
    pub stopped_by: StopReason,
    pub steps_total: u64,
    pub wall: Duration,
    /// Wall time spent inside constraint-domain operations.
    pub domain_time: Duration,
    pub max_live_states: usize,
    pub concretizations: u64,
    /// (site, label) pairs observed across all paths.
    pub branch_hits: BTreeSet<(String, String)>,
    /// Probe points visited on at least one path.
    pub probes_hit: BTreeSet<String>,
    pub site_registry: BTreeSet<String>,
    pub probe_registry: BTreeSet<String>,
}

impl ExploreOutcome {
    pub fn paths_ok(&self) -> usize {
        self.paths.iter().filter(|p| p.status.is_ok()).count()
    }

    pub fn paths_error(&self) -> usize {
        self.paths.iter().filter(|p| p.status.is_error()).count()
    }

    pub fn paths_limit(&self) -> usize {
        self.paths
            .iter()
            .filter(|p| matches!(p.status, PathStatus::LimitExceeded))
            .count()
    }

    /// Distinct fault signatures over all error paths.
    pub fn unique_faults(&self) -> BTreeSet<FaultSignature> {
        self.paths
            .iter()
            .filter_map(|p| p.status.fault().cloned())
            .collect()
    }

    /// Percentage of declared (site, label) pairs taken. Every site
    /// has exactly two labels.
    pub fn branch_coverage_pct(&self) -> f64 {
        percentage(self.branch_hits.len(), self.site_registry.len() * 2)
    }

    /// Percentage of declared probe points visited.
    pub fn probe_coverage_pct(&self) -> f64 {
        percentage(self.probes_hit.len(), self.probe_registry.len())
    }

    /// Share of wall time spent in constraint-domain operations.
    pub fn domain_time_pct(&self) -> f64 {
        if self.wall.is_zero() {
            0.0
        } else {
            100.0 * self.domain_time.as_secs_f64() / self.wall.as_secs_f64()
        }
    }

    pub fn steps_per_second(&self) -> f64 {
        let secs = self.wall.as_secs_f64();
        if secs == 0.0 {
            0.0
        } else {
            self.steps_total as f64 / secs
        }
    }
}

fn percentage(numerator: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        100.0
    } else {
        100.0 * numerator as f64 / denominator as f64
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    /// A re-run of a step disagreed with the choices recorded on its
    /// first attempt. Worlds must be deterministic; this is a bug in
    /// the world, not in the inputs.
    #[error("world behaved nondeterministically: {0}")]
    Nondeterminism(String),
    /// A scripted run hit a multi-feasible choice that is not a drop
    /// verdict. Scripts only rule on packet fates, so the world handed
    /// to [`run_scripted`] must keep every other choice single-valued.
    #[error("scripted run forked outside the drop script: {0}")]
    UnexpectedFork(String),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay diverged from the recorded trace: {0}")]
    Divergence(String),
}

struct PathState<W> {
    id: u64,
    parent: Option<u64>,
    world: W,
    store: ConstraintStore,
    /// Choices committed by completed steps.
    trace: Vec<ChoiceRecord>,
    /// Choices made for the in-progress step by aborted attempts (plus
    /// the fork option this child exists for); consumed on re-run.
    pending: Vec<ChoiceRecord>,
    coverage: BTreeSet<String>,
    step_count: u64,
}

impl<W: World> PathState<W> {
    fn finish(self, status: PathStatus) -> PathResult {
        debug_assert!(
            self.pending.is_empty() || !matches!(status, PathStatus::FinishedOk),
            "paths cannot finish cleanly with unconsumed choices"
        );
        let final_world =
            serde_json::to_value(&self.world).expect("worlds always serialize");
        PathResult {
            state_id: self.id,
            parent_id: self.parent,
            status,
            trace: self.trace,
            store: self.store,
            final_world,
            coverage: self.coverage,
            step_count: self.step_count,
        }
    }
}

/// Explore every reachable path of `initial` under the given strategy
/// and limits.
pub fn explore<W: World>(
    initial: W,
    strategy: Strategy,
    limits: &Limits,
) -> Result<ExploreOutcome, EngineError> {
    let start = Instant::now();
    let site_registry: BTreeSet<String> =
        initial.choice_sites().into_iter().map(str::to_string).collect();
    let probe_registry: BTreeSet<String> =
        initial.probe_points().into_iter().map(str::to_string).collect();

    let mut frontier: Vec<PathState<W>> = vec![PathState {
        id: 0,
        parent: None,
        world: initial,
        store: ConstraintStore::new(),
        trace: Vec::new(),
        pending: Vec::new(),
        coverage: BTreeSet::new(),
        step_count: 0,
    }];
    let mut next_id: u64 = 1;
    let mut selections: u64 = 0;

    let mut paths: Vec<PathResult> = Vec::new();
    let mut branch_hits = BTreeSet::new();
    let mut steps_total: u64 = 0;
    let mut domain_time = Duration::ZERO;
    let mut concretizations: u64 = 0;
    let mut max_live_states = 1usize;
    let mut stopped_by = StopReason::FrontierExhausted;

    let out_of_time =
        |start: Instant| limits.time_limit.is_some_and(|tl| start.elapsed() >= tl);

    'outer: while !frontier.is_empty() {
        if paths.len() >= limits.max_paths {
            stopped_by = StopReason::MaxPathsReached;
            break;
        }
        if out_of_time(start) {
            stopped_by = StopReason::TimeLimit;
            break;
        }

        let mut st = select_next(&mut frontier, strategy, &mut selections);
        max_live_states = max_live_states.max(frontier.len() + 1);

        loop {
            if st.step_count >= limits.max_steps_per_path {
                paths.push(st.finish(PathStatus::LimitExceeded));
                break;
            }
            if out_of_time(start) {
                paths.push(st.finish(PathStatus::LimitExceeded));
                stopped_by = StopReason::TimeLimit;
                break 'outer;
            }

            let mut attempt_world = st.world.clone();
            let mut attempt_store = st.store.clone();
            let mut ctx = StepCtx::new(
                &mut attempt_store,
                &st.pending,
                st.trace.len() as u64,
                &mut st.coverage,
                &mut branch_hits,
                &site_registry,
                &probe_registry,
                CtxMode::Explore,
            );
            let outcome = attempt_world.step(&mut ctx);
            let consumed = ctx.cursor;
            let events = ctx.concretization_events;
            let newly = std::mem::take(&mut ctx.newly);
            domain_time += ctx.domain_time;
            drop(ctx);

            match outcome {
                Ok(status) => {
                    if consumed != st.pending.len() {
                        return Err(EngineError::Nondeterminism(format!(
                            "step completed after consuming {consumed} of {} recorded choices",
                            st.pending.len()
                        )));
                    }
                    st.world = attempt_world;
                    st.store = attempt_store;
                    st.trace.append(&mut st.pending);
                    st.trace.extend(newly);
                    debug_assert!(
                        st.trace.iter().enumerate().all(|(i, r)| r.choice_id == i as u64),
                        "choice ids must equal trace positions"
                    );
                    st.step_count += 1;
                    steps_total += 1;
                    concretizations += events;
                    match status {
                        StepStatus::Running => continue,
                        StepStatus::FinishedOk => {
                            paths.push(st.finish(PathStatus::FinishedOk));
                            break;
                        }
                        StepStatus::FinishedError(fault) => {
                            paths.push(st.finish(PathStatus::FinishedError { fault }));
                            break;
                        }
                    }
                }
                Err(Interrupt::Fork { options }) => {
                    if consumed != st.pending.len() {
                        return Err(EngineError::Nondeterminism(format!(
                            "step forked after consuming {consumed} of {} recorded choices",
                            st.pending.len()
                        )));
                    }
                    debug_assert!(options.len() >= 2, "forks need at least two options");
                    let mut base = std::mem::take(&mut st.pending);
                    base.extend(newly);
                    for option in options {
                        let mut pending = base.clone();
                        pending.push(option);
                        frontier.push(PathState {
                            id: next_id,
                            parent: Some(st.id),
                            world: st.world.clone(),
                            store: st.store.clone(),
                            trace: st.trace.clone(),
                            pending,
                            coverage: st.coverage.clone(),
                            step_count: st.step_count,
                        });
                        next_id += 1;
                    }
                    max_live_states = max_live_states.max(frontier.len());
                    break;
                }
                Err(Interrupt::Mismatch { detail }) => {
                    return Err(EngineError::Nondeterminism(detail));
                }
                Err(Interrupt::NeedsVerdict { .. }) => {
                    unreachable!("drop scripts do not exist during exploration")
                }
            }
        }
    }

    let probes_hit = paths.iter().flat_map(|p| p.coverage.iter().cloned()).collect();
    Ok(ExploreOutcome {
        paths,
        stopped_by,
        steps_total,
        wall: start.elapsed(),
        domain_time,
        max_live_states,
        concretizations,
        branch_hits,
        probes_hit,
        site_registry,
        probe_registry,
    })
}

fn select_next<W>(
    frontier: &mut Vec<PathState<W>>,
    strategy: Strategy,
    selections: &mut u64,
) -> PathState<W> {
    assert!(!frontier.is_empty(), "select_next requires a non-empty frontier");
    let index = match strategy {
        Strategy::Dfs => frontier.len() - 1,
        Strategy::Bfs => 0,
        Strategy::RandomSeeded(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(*selections));
            (rng.next_u64() % frontier.len() as u64) as usize
        }
    };
    *selections += 1;
    frontier.remove(index)
}

/// Re-run one recorded path concretely.
///
/// No forking happens: every fresh symbolic byte is bound to its
/// recorded witness on creation, every choice point consumes the next
/// trace record, and any disagreement is a [`ReplayError::Divergence`]
/// (which indicates nondeterminism or a stale test case, both worth
/// failing loudly over).
pub fn replay_path<W: World>(
    initial: W,
    trace: &[ChoiceRecord],
    witnesses: &BTreeMap<u32, u8>,
    limits: &Limits,
) -> Result<PathResult, ReplayError> {
    let site_registry: BTreeSet<String> =
        initial.choice_sites().into_iter().map(str::to_string).collect();
    let probe_registry: BTreeSet<String> =
        initial.probe_points().into_iter().map(str::to_string).collect();

    let mut st = PathState {
        id: 0,
        parent: None,
        world: initial,
        store: ConstraintStore::new(),
        trace: Vec::new(),
        pending: trace.to_vec(),
        coverage: BTreeSet::new(),
        step_count: 0,
    };
    let mut branch_hits = BTreeSet::new();

    loop {
        if st.step_count >= limits.max_steps_per_path {
            return Ok(st.finish(PathStatus::LimitExceeded));
        }

        let mut attempt_world = st.world.clone();
        let mut attempt_store = st.store.clone();
        let mut ctx = StepCtx::new(
            &mut attempt_store,
            &st.pending,
            st.trace.len() as u64,
            &mut st.coverage,
            &mut branch_hits,
            &site_registry,
            &probe_registry,
            CtxMode::Replay { witnesses },
        );
        let outcome = attempt_world.step(&mut ctx);
        let consumed = ctx.cursor;
        let newly = std::mem::take(&mut ctx.newly);
        drop(ctx);

        match outcome {
            Ok(status) => {
                st.world = attempt_world;
                st.store = attempt_store;
                st.trace.extend(st.pending.drain(..consumed));
                st.trace.extend(newly);
                st.step_count += 1;
                match status {
                    StepStatus::Running => continue,
                    StepStatus::FinishedOk | StepStatus::FinishedError(_) => {
                        if !st.pending.is_empty() {
                            return Err(ReplayError::Divergence(format!(
                                "path terminated with {} recorded choices unconsumed",
                                st.pending.len()
                            )));
                        }
                        let status = match status {
                            StepStatus::FinishedOk => PathStatus::FinishedOk,
                            StepStatus::FinishedError(fault) => {
                                PathStatus::FinishedError { fault }
                            }
                            StepStatus::Running => unreachable!(),
                        };
                        return Ok(st.finish(status));
                    }
                }
            }
            Err(Interrupt::Fork { .. }) => {
                return Err(ReplayError::Divergence(
                    "execution forked during replay; witnesses failed to pin a choice".into(),
                ));
            }
            Err(Interrupt::Mismatch { detail }) => {
                return Err(ReplayError::Divergence(detail));
            }
            Err(Interrupt::NeedsVerdict { .. }) => {
                unreachable!("drop scripts do not exist during replay")
            }
        }
    }
}

/// The outcome of one scripted run.
#[derive(Debug)]
pub enum ScriptStep {
    /// The script covered every drop verdict the run asked for, and
    /// the path terminated.
    Complete(Box<PathResult>),
    /// The run asked for one more verdict than the script holds.
    /// Append a decision for this packet and run again.
    NeedsDropVerdict { transmit_index: u64 },
}

/// Run one path under an explicit drop script, forking nothing.
///
/// Every budgeted drop verdict consumes the next entry of `drops`;
/// running past the end surfaces as
/// [`ScriptStep::NeedsDropVerdict`] rather than a fork, so a caller
/// can enumerate drop subsets by extending the script one decision at
/// a time. This is the independent cross-check for the explorer: it
/// shares the constraint domain and the world but none of the
/// frontier or forking machinery.
///
/// The world must hold every non-drop choice single-valued (symbolic
/// bytes may exist, but branching on them must stay one-sided);
/// anything else is an [`EngineError::UnexpectedFork`].
pub fn run_scripted<W: World>(
    initial: W,
    drops: &[DropDecision],
    limits: &Limits,
) -> Result<ScriptStep, EngineError> {
    let site_registry: BTreeSet<String> =
        initial.choice_sites().into_iter().map(str::to_string).collect();
    let probe_registry: BTreeSet<String> =
        initial.probe_points().into_iter().map(str::to_string).collect();

    let mut st = PathState {
        id: 0,
        parent: None,
        world: initial,
        store: ConstraintStore::new(),
        trace: Vec::new(),
        pending: Vec::new(),
        coverage: BTreeSet::new(),
        step_count: 0,
    };
    let mut branch_hits = BTreeSet::new();
    let mut script_cursor = 0usize;

    loop {
        if st.step_count >= limits.max_steps_per_path {
            return Ok(ScriptStep::Complete(Box::new(st.finish(PathStatus::LimitExceeded))));
        }

        let mut attempt_world = st.world.clone();
        let mut attempt_store = st.store.clone();
        let mut ctx = StepCtx::new(
            &mut attempt_store,
            &st.pending,
            st.trace.len() as u64,
            &mut st.coverage,
            &mut branch_hits,
            &site_registry,
            &probe_registry,
            CtxMode::Scripted { verdicts: drops, cursor: &mut script_cursor },
        );
        let outcome = attempt_world.step(&mut ctx);
        let newly = std::mem::take(&mut ctx.newly);
        drop(ctx);

        match outcome {
            Ok(status) => {
                st.world = attempt_world;
                st.store = attempt_store;
                st.trace.extend(newly);
                st.step_count += 1;
                match status {
                    StepStatus::Running => continue,
                    StepStatus::FinishedOk => {
                        return Ok(ScriptStep::Complete(Box::new(
                            st.finish(PathStatus::FinishedOk),
                        )));
                    }
                    StepStatus::FinishedError(fault) => {
                        return Ok(ScriptStep::Complete(Box::new(
                            st.finish(PathStatus::FinishedError { fault }),
                        )));
                    }
                }
            }
            Err(Interrupt::NeedsVerdict { transmit_index }) => {
                return Ok(ScriptStep::NeedsDropVerdict { transmit_index });
            }
            Err(Interrupt::Fork { options }) => {
                let detail = options
                    .first()
                    .map(|r| r.choice.to_string())
                    .unwrap_or_else(|| "empty fork".into());
                return Err(EngineError::UnexpectedFork(detail));
            }
            Err(Interrupt::Mismatch { detail }) => {
                return Err(EngineError::Nondeterminism(detail));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explore::record::{Choice, DropDecision};
    use crate::symval::Predicate;
    use serde::Serialize;

    /// Transmits `total` packets, one per step; the channel may drop
    /// any of them. Terminal state is the delivery bitmap.
    #[derive(Clone, Serialize)]
    struct DropWorld {
        total: u64,
        sent: u64,
        delivered: Vec<bool>,
    }

    impl DropWorld {
        fn new(total: u64) -> Self {
            DropWorld { total, sent: 0, delivered: Vec::new() }
        }
    }

    impl World for DropWorld {
        fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<StepStatus, Interrupt> {
            let verdict = ctx.drop_decision("drop_world.verdict", self.sent, true)?;
            self.delivered.push(verdict == DropDecision::Delivered);
            self.sent += 1;
            if self.sent == self.total {
                Ok(StepStatus::FinishedOk)
            } else {
                Ok(StepStatus::Running)
            }
        }

        fn choice_sites(&self) -> Vec<&'static str> {
            vec!["drop_world.verdict"]
        }

        fn probe_points(&self) -> Vec<&'static str> {
            vec![]
        }
    }

    fn delivery_bitmap(path: &PathResult) -> Vec<bool> {
        path.trace
            .iter()
            .map(|r| match &r.choice {
                Choice::PacketDrop { decision, .. } => *decision == DropDecision::Delivered,
                other => panic!("drop world only records drops, found {other}"),
            })
            .collect()
    }

    #[test]
    fn three_packets_with_unlimited_drops_yield_eight_paths() {
        let out = explore(DropWorld::new(3), Strategy::Dfs, &Limits::default()).unwrap();
        assert_eq!(out.paths.len(), 8);
        assert_eq!(out.paths_ok(), 8);
        let mut seen: Vec<Vec<bool>> = out.paths.iter().map(delivery_bitmap).collect();
        seen.sort();
        let mut expected: Vec<Vec<bool>> = (0..8u8)
            .map(|bits| (0..3).map(|i| bits & (1 << i) != 0).collect())
            .collect();
        expected.sort();
        assert_eq!(seen, expected);
    }

    #[test]
    fn dfs_explores_the_all_dropped_path_first() {
        let out = explore(DropWorld::new(3), Strategy::Dfs, &Limits::default()).unwrap();
        assert_eq!(delivery_bitmap(&out.paths[0]), vec![false, false, false]);
        // The last path finished under DFS is the first-declared
        // option at every level: everything delivered.
        assert_eq!(delivery_bitmap(&out.paths[7]), vec![true, true, true]);
    }

    #[test]
    fn bfs_explores_the_all_delivered_path_first() {
        let out = explore(DropWorld::new(2), Strategy::Bfs, &Limits::default()).unwrap();
        assert_eq!(delivery_bitmap(&out.paths[0]), vec![true, true]);
    }

    #[test]
    fn random_strategy_is_deterministic_per_seed() {
        let a = explore(DropWorld::new(3), Strategy::RandomSeeded(42), &Limits::default())
            .unwrap();
        let b = explore(DropWorld::new(3), Strategy::RandomSeeded(42), &Limits::default())
            .unwrap();
        let order_a: Vec<Vec<bool>> = a.paths.iter().map(delivery_bitmap).collect();
        let order_b: Vec<Vec<bool>> = b.paths.iter().map(delivery_bitmap).collect();
        assert_eq!(order_a, order_b);
        assert_eq!(a.paths.len(), 8);
    }

    #[test]
    fn max_paths_emits_exactly_that_many() {
        let limits = Limits { max_paths: 1, ..Limits::default() };
        let out = explore(DropWorld::new(3), Strategy::Dfs, &limits).unwrap();
        assert_eq!(out.paths.len(), 1);
        assert_eq!(out.stopped_by, StopReason::MaxPathsReached);
    }

    #[test]
    fn choice_ids_are_trace_positions() {
        let out = explore(DropWorld::new(3), Strategy::Dfs, &Limits::default()).unwrap();
        for path in &out.paths {
            for (i, record) in path.trace.iter().enumerate() {
                assert_eq!(record.choice_id, i as u64);
            }
        }
    }

    #[test]
    fn branch_coverage_accounts_site_labels() {
        let out = explore(DropWorld::new(1), Strategy::Dfs, &Limits::default()).unwrap();
        assert_eq!(out.branch_hits.len(), 2);
        assert!((out.branch_coverage_pct() - 100.0).abs() < f64::EPSILON);
    }

    /// Runs forever; only the step limit stops it.
    #[derive(Clone, Serialize)]
    struct SpinWorld;

    impl World for SpinWorld {
        fn step(&mut self, _ctx: &mut StepCtx<'_>) -> Result<StepStatus, Interrupt> {
            Ok(StepStatus::Running)
        }

        fn choice_sites(&self) -> Vec<&'static str> {
            vec![]
        }

        fn probe_points(&self) -> Vec<&'static str> {
            vec![]
        }
    }

    #[test]
    fn step_limit_marks_the_path_limit_exceeded() {
        let limits = Limits { max_steps_per_path: 10, ..Limits::default() };
        let out = explore(SpinWorld, Strategy::Dfs, &limits).unwrap();
        assert_eq!(out.paths.len(), 1);
        assert_eq!(out.paths_limit(), 1);
        assert_eq!(out.paths[0].step_count, 10);
    }

    /// Forks on a symbolic byte, then appends a branch-specific marker
    /// to its own state. Used to prove siblings are isolated.
    #[derive(Clone, Serialize)]
    struct MarkerWorld {
        markers: Vec<&'static str>,
    }

    impl World for MarkerWorld {
        fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<StepStatus, Interrupt> {
            let b = ctx.fresh_byte()?;
            if ctx.decide("marker.split", Predicate::ge(b, 128))? {
                self.markers.push("high");
            } else {
                self.markers.push("low");
            }
            Ok(StepStatus::FinishedOk)
        }

        fn choice_sites(&self) -> Vec<&'static str> {
            vec!["marker.split"]
        }

        fn probe_points(&self) -> Vec<&'static str> {
            vec![]
        }
    }

    #[test]
    fn sibling_worlds_never_share_state() {
        let initial = MarkerWorld { markers: vec!["root"] };
        let out = explore(initial, Strategy::Dfs, &Limits::default()).unwrap();
        assert_eq!(out.paths.len(), 2);
        // Each terminal world carries the root marker plus exactly its
        // own; any cross-contamination would show up in the snapshot.
        let worlds: Vec<&serde_json::Value> =
            out.paths.iter().map(|p| &p.final_world).collect();
        let markers: Vec<Vec<&str>> = worlds
            .iter()
            .map(|w| {
                w["markers"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|m| m.as_str().unwrap())
                    .collect()
            })
            .collect();
        assert!(markers.contains(&vec!["root", "high"]));
        assert!(markers.contains(&vec!["root", "low"]));
    }

    /// Reads mutable state outside the snapshot, so its re-runs
    /// disagree with their first attempts.
    #[derive(Clone, Serialize)]
    struct LeakyWorld;

    impl World for LeakyWorld {
        fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<StepStatus, Interrupt> {
            use std::sync::atomic::{AtomicU8, Ordering};
            static CALLS: AtomicU8 = AtomicU8::new(0);
            let n = CALLS.fetch_add(1, Ordering::Relaxed);
            let b = ctx.fresh_byte()?;
            // The predicate constant depends on how often step ran,
            // which the snapshot does not capture.
            ctx.decide("leaky.split", Predicate::ge(b, 100 + n))?;
            Ok(StepStatus::FinishedOk)
        }

        fn choice_sites(&self) -> Vec<&'static str> {
            vec!["leaky.split"]
        }

        fn probe_points(&self) -> Vec<&'static str> {
            vec![]
        }
    }

    #[test]
    fn nondeterministic_worlds_are_detected() {
        let err = explore(LeakyWorld, Strategy::Dfs, &Limits::default()).unwrap_err();
        let EngineError::Nondeterminism(detail) = err else {
            panic!("expected nondeterminism, got {err}");
        };
        assert!(detail.contains("leaky.split"), "unhelpful detail: {detail}");
    }

    /// Peeks a witness for hashing before branching on the same byte.
    #[derive(Clone, Serialize)]
    struct PeekWorld;

    impl World for PeekWorld {
        fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<StepStatus, Interrupt> {
            let b = ctx.fresh_byte()?;
            let peeked = ctx.witness_peek(b);
            assert_eq!(peeked, 0, "fresh byte witnesses are the domain minimum");
            ctx.decide("peek.split", Predicate::ge(b, 128))?;
            Ok(StepStatus::FinishedOk)
        }

        fn choice_sites(&self) -> Vec<&'static str> {
            vec!["peek.split"]
        }

        fn probe_points(&self) -> Vec<&'static str> {
            vec![]
        }
    }

    #[test]
    fn witness_peek_does_not_narrow_the_domain() {
        let out = explore(PeekWorld, Strategy::Dfs, &Limits::default()).unwrap();
        assert_eq!(out.paths.len(), 2, "peeking must keep both branches feasible");
        // One committed peek per path; aborted attempts do not count.
        assert_eq!(out.concretizations, 2);
    }

    #[test]
    fn every_path_replays_to_its_own_outcome() {
        let out = explore(DropWorld::new(3), Strategy::Dfs, &Limits::default()).unwrap();
        for path in &out.paths {
            let replayed = replay_path(
                DropWorld::new(3),
                &path.trace,
                &path.witnesses(),
                &Limits::default(),
            )
            .unwrap();
            assert_eq!(replayed.status, path.status);
            assert_eq!(replayed.trace, path.trace);
        }
    }

    #[test]
    fn replay_rejects_a_tampered_trace() {
        let out = explore(DropWorld::new(2), Strategy::Dfs, &Limits::default()).unwrap();
        let path = &out.paths[0];
        let mut tampered = path.trace.clone();
        tampered[0].choice = Choice::PacketDrop {
            site: "drop_world.verdict".into(),
            transmit_index: 99,
            decision: DropDecision::Dropped,
        };
        let err = replay_path(
            DropWorld::new(2),
            &tampered,
            &path.witnesses(),
            &Limits::default(),
        )
        .unwrap_err();
        let ReplayError::Divergence(detail) = err;
        assert!(detail.contains("drop verdict"), "unhelpful detail: {detail}");
    }

    #[test]
    fn replay_rejects_a_truncated_trace() {
        let out = explore(DropWorld::new(3), Strategy::Dfs, &Limits::default()).unwrap();
        let path = &out.paths[0];
        let truncated = &path.trace[..1];
        let err = replay_path(
            DropWorld::new(3),
            truncated,
            &path.witnesses(),
            &Limits::default(),
        )
        .unwrap_err();
        let ReplayError::Divergence(detail) = err;
        assert!(detail.contains("ran out of recorded choices"), "unhelpful detail: {detail}");
    }

    #[test]
    fn replay_rejects_an_overlong_trace() {
        let out = explore(DropWorld::new(2), Strategy::Dfs, &Limits::default()).unwrap();
        let path = &out.paths[0];
        let mut padded = path.trace.clone();
        padded.push(ChoiceRecord {
            choice_id: padded.len() as u64,
            choice: Choice::PacketDrop {
                site: "drop_world.verdict".into(),
                transmit_index: 2,
                decision: DropDecision::Dropped,
            },
        });
        let err = replay_path(
            DropWorld::new(2),
            &padded,
            &path.witnesses(),
            &Limits::default(),
        )
        .unwrap_err();
        let ReplayError::Divergence(detail) = err;
        assert!(detail.contains("unconsumed"), "unhelpful detail: {detail}");
    }

    /// Grow scripts one verdict at a time until every run completes.
    fn enumerate_drop_scripts(total: u64) -> Vec<PathResult> {
        let mut done = Vec::new();
        let mut stack: Vec<Vec<DropDecision>> = vec![Vec::new()];
        while let Some(script) = stack.pop() {
            match run_scripted(DropWorld::new(total), &script, &Limits::default()).unwrap() {
                ScriptStep::Complete(path) => done.push(*path),
                ScriptStep::NeedsDropVerdict { transmit_index } => {
                    assert_eq!(
                        transmit_index,
                        script.len() as u64,
                        "this world rules on every packet, in transmit order"
                    );
                    for decision in [DropDecision::Delivered, DropDecision::Dropped] {
                        let mut next = script.clone();
                        next.push(decision);
                        stack.push(next);
                    }
                }
            }
        }
        done
    }

    #[test]
    fn scripted_enumeration_matches_exploration() {
        let explored = explore(DropWorld::new(3), Strategy::Dfs, &Limits::default()).unwrap();
        let scripted = enumerate_drop_scripts(3);
        assert_eq!(scripted.len(), explored.paths.len());

        let mut explored_paths: Vec<&PathResult> = explored.paths.iter().collect();
        let mut scripted_paths: Vec<&PathResult> = scripted.iter().collect();
        explored_paths.sort_by_key(|p| delivery_bitmap(p));
        scripted_paths.sort_by_key(|p| delivery_bitmap(p));
        for (e, s) in explored_paths.iter().zip(&scripted_paths) {
            assert_eq!(e.trace, s.trace);
            assert_eq!(e.status, s.status);
        }
    }

    #[test]
    fn scripted_runs_ask_for_the_next_missing_verdict() {
        let step = run_scripted(DropWorld::new(2), &[], &Limits::default()).unwrap();
        let ScriptStep::NeedsDropVerdict { transmit_index } = step else {
            panic!("an empty script cannot complete a run that transmits");
        };
        assert_eq!(transmit_index, 0);

        let script = [DropDecision::Dropped];
        let step = run_scripted(DropWorld::new(2), &script, &Limits::default()).unwrap();
        let ScriptStep::NeedsDropVerdict { transmit_index } = step else {
            panic!("a one-entry script leaves the second packet unruled");
        };
        assert_eq!(transmit_index, 1);
    }

    #[test]
    fn scripted_runs_reject_non_drop_forks() {
        let initial = MarkerWorld { markers: vec![] };
        let err = run_scripted(initial, &[], &Limits::default()).unwrap_err();
        assert!(matches!(err, EngineError::UnexpectedFork(_)), "got {err}");
    }

    /// Transmits three packets but lets the channel rule only on the
    /// first; the other two are forced deliveries.
    #[derive(Clone, Serialize)]
    struct BudgetWorld {
        sent: u64,
    }

    impl World for BudgetWorld {
        fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<StepStatus, Interrupt> {
            ctx.drop_decision("budget_world.verdict", self.sent, self.sent == 0)?;
            self.sent += 1;
            if self.sent == 3 {
                Ok(StepStatus::FinishedOk)
            } else {
                Ok(StepStatus::Running)
            }
        }

        fn choice_sites(&self) -> Vec<&'static str> {
            vec!["budget_world.verdict"]
        }

        fn probe_points(&self) -> Vec<&'static str> {
            vec![]
        }
    }

    #[test]
    fn forced_verdicts_consume_no_script_entries() {
        let script = [DropDecision::Dropped];
        let step = run_scripted(BudgetWorld { sent: 0 }, &script, &Limits::default()).unwrap();
        let ScriptStep::Complete(path) = step else {
            panic!("one budgeted verdict plus two forced ones fits a one-entry script");
        };
        assert_eq!(path.status, PathStatus::FinishedOk);
        assert_eq!(delivery_bitmap(&path), vec![false, true, true]);
    }
}

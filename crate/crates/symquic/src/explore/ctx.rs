//! The contract between a world and the engine.
//!
//! A world is a deterministic state machine over plain values. Every
//! source of branching must flow through [`StepCtx`]; anything else
//! (clocks, RNGs, global state) would make forked executions diverge
//! from their recorded traces, which the engine detects and reports as
//! nondeterminism rather than silently exploring garbage.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::explore::record::{Choice, ChoiceRecord, DropDecision, FaultSignature};
use crate::symval::{ConstraintStore, Predicate, SymVarId};

/// What a completed step means for the path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepStatus {
    /// More steps to run.
    Running,
    /// The path terminated with both endpoints in agreement and every
    /// oracle satisfied.
    FinishedOk,
    /// The path terminated and an oracle flagged a fault.
    FinishedError(FaultSignature),
}

/// Why a step could not run to completion.
#[derive(Debug, Clone)]
pub enum Interrupt {
    /// The step reached a choice with several feasible options. The
    /// engine re-runs the step once per option; the aborted attempt's
    /// partial world is discarded.
    Fork { options: Vec<ChoiceRecord> },
    /// The execution disagreed with the recorded trace it was given.
    /// During exploration this means the world is nondeterministic;
    /// during replay it means the stored case no longer matches the
    /// code.
    Mismatch { detail: String },
    /// A scripted run ([`run_scripted`](crate::explore::run_scripted))
    /// reached a drop verdict past the end of its script. The caller
    /// appends a decision for this packet and runs again; exploration
    /// and replay never produce this.
    NeedsVerdict { transmit_index: u64 },
}

/// A deterministic, forkable state machine the engine can explore.
///
/// `Clone` is the snapshot mechanism: the engine clones the world
/// before every step so an aborted attempt can be rolled back, and
/// clones it again for each fork child. `Serialize` keeps snapshots
/// honest; the isolation tests serialize sibling worlds and diff them.
pub trait World: Clone + Serialize {
    /// Advance by one unit of work (one endpoint activation). All
    /// branching goes through `ctx`.
    fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<StepStatus, Interrupt>;

    /// Every choice site `step` may ever pass to
    /// [`StepCtx::decide`] or [`StepCtx::drop_decision`] under the
    /// world's current configuration. Denominator for branch coverage.
    fn choice_sites(&self) -> Vec<&'static str>;

    /// Every probe point `step` may ever pass to [`StepCtx::probe`].
    /// Denominator for probe coverage.
    fn probe_points(&self) -> Vec<&'static str>;
}

pub(crate) enum CtxMode<'a> {
    Explore,
    /// Replaying a stored case: fresh bytes are bound to their
    /// recorded witnesses immediately, and choice points past the end
    /// of the queue are trace divergences, not forks.
    Replay { witnesses: &'a BTreeMap<u32, u8> },
    /// Running one path under an externally supplied drop script: each
    /// budgeted drop verdict consumes the next script entry instead of
    /// forking, and running out of entries raises
    /// [`Interrupt::NeedsVerdict`]. The cursor lives outside the ctx
    /// because consumption spans steps.
    Scripted { verdicts: &'a [DropDecision], cursor: &'a mut usize },
}

/// The engine-side services available to a world during one step.
///
/// A step consumes queued choice records first (re-running a prefix
/// that an earlier aborted attempt already decided), then switches to
/// making fresh choices: single-option choices are recorded and taken
/// inline, multi-option choices abort the step with
/// [`Interrupt::Fork`].
pub struct StepCtx<'a> {
    pub(crate) store: &'a mut ConstraintStore,
    pub(crate) pending: &'a [ChoiceRecord],
    pub(crate) cursor: usize,
    base_choice_id: u64,
    pub(crate) newly: Vec<ChoiceRecord>,
    coverage: &'a mut BTreeSet<String>,
    branch_hits: &'a mut BTreeSet<(String, String)>,
    site_registry: &'a BTreeSet<String>,
    probe_registry: &'a BTreeSet<String>,
    mode: CtxMode<'a>,
    pub(crate) concretization_events: u64,
    pub(crate) domain_time: Duration,
}

impl<'a> StepCtx<'a> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &'a mut ConstraintStore,
        pending: &'a [ChoiceRecord],
        base_choice_id: u64,
        coverage: &'a mut BTreeSet<String>,
        branch_hits: &'a mut BTreeSet<(String, String)>,
        site_registry: &'a BTreeSet<String>,
        probe_registry: &'a BTreeSet<String>,
        mode: CtxMode<'a>,
    ) -> Self {
        StepCtx {
            store,
            pending,
            cursor: 0,
            base_choice_id,
            newly: Vec::new(),
            coverage,
            branch_hits,
            site_registry,
            probe_registry,
            mode,
            concretization_events: 0,
            domain_time: Duration::ZERO,
        }
    }

    /// Allocate a fresh symbolic byte with the full 0..=255 domain.
    ///
    /// Allocation is not a choice point; variable ids depend only on
    /// the deterministic order of `fresh_byte` calls along the path.
    pub fn fresh_byte(&mut self) -> Result<SymVarId, Interrupt> {
        let var = self.store.fresh_var();
        if let CtxMode::Replay { witnesses } = &self.mode {
            let value = *witnesses.get(&var.index()).ok_or_else(|| Interrupt::Mismatch {
                detail: format!("replayed run created {var}, which has no recorded witness"),
            })?;
            let bound = self.store.apply(&Predicate::eq(var, value), true);
            debug_assert!(bound, "binding a fresh variable cannot fail");
        }
        Ok(var)
    }

    /// Branch on a predicate over one symbolic byte.
    ///
    /// Returns which branch this path takes. If both branches are
    /// feasible and we are exploring, the step is aborted with a fork;
    /// the caller just propagates the interrupt with `?`.
    pub fn decide(&mut self, site: &'static str, pred: Predicate) -> Result<bool, Interrupt> {
        self.check_site(site);
        if self.cursor < self.pending.len() {
            let record = &self.pending[self.cursor];
            let taken = match &record.choice {
                Choice::PredicateBranch { site: s, pred: p, taken } if s == site && *p == pred => {
                    *taken
                }
                other => {
                    return Err(self.mismatch(format!(
                        "choice {} expects `{other}`, but the world asked `{}` at {site}",
                        record.choice_id,
                        pred.describe(true),
                    )))
                }
            };
            let applied = self.timed(|store| store.apply(&pred, taken));
            if !applied {
                return Err(self.mismatch(format!(
                    "recorded branch `{}` at {site} is no longer feasible",
                    pred.describe(taken),
                )));
            }
            self.cursor += 1;
            self.note_branch(site, branch_label(taken));
            return Ok(taken);
        }

        let branches = self.timed(|store| store.decide(&pred));
        if branches.len() == 1 {
            let (taken, narrowed) = branches.into_iter().next().expect("checked length");
            *self.store = narrowed;
            self.push_new(Choice::PredicateBranch { site: site.to_string(), pred, taken });
            self.note_branch(site, branch_label(taken));
            return Ok(taken);
        }
        if let CtxMode::Replay { .. } = self.mode {
            return Err(self.mismatch(format!(
                "replay ran out of recorded choices at branch {site} ({})",
                pred.describe(true),
            )));
        }
        let choice_id = self.next_choice_id();
        let options = branches
            .into_iter()
            .map(|(taken, _)| ChoiceRecord {
                choice_id,
                choice: Choice::PredicateBranch { site: site.to_string(), pred, taken },
            })
            .collect();
        Err(Interrupt::Fork { options })
    }

    /// Let the channel rule on the fate of one transmitted packet.
    ///
    /// With `can_drop` false (drop budget exhausted, or drops disabled
    /// by configuration) the packet is delivered without forking, but
    /// the verdict is still recorded so replay stays aligned.
    pub fn drop_decision(
        &mut self,
        site: &'static str,
        transmit_index: u64,
        can_drop: bool,
    ) -> Result<DropDecision, Interrupt> {
        self.check_site(site);
        if self.cursor < self.pending.len() {
            let record = &self.pending[self.cursor];
            let decision = match &record.choice {
                Choice::PacketDrop { site: s, transmit_index: t, decision }
                    if s == site && *t == transmit_index =>
                {
                    *decision
                }
                other => {
                    return Err(self.mismatch(format!(
                        "choice {} expects `{other}`, but the world asked for a drop verdict \
                         on packet #{transmit_index} at {site}",
                        record.choice_id,
                    )))
                }
            };
            self.cursor += 1;
            self.note_branch(site, decision.label());
            return Ok(decision);
        }

        if can_drop {
            if let CtxMode::Scripted { verdicts, cursor } = &mut self.mode {
                let Some(&decision) = verdicts.get(**cursor) else {
                    return Err(Interrupt::NeedsVerdict { transmit_index });
                };
                **cursor += 1;
                self.push_new(Choice::PacketDrop {
                    site: site.to_string(),
                    transmit_index,
                    decision,
                });
                self.note_branch(site, decision.label());
                return Ok(decision);
            }
        }
        if let CtxMode::Replay { .. } = self.mode {
            return Err(self.mismatch(format!(
                "replay ran out of recorded choices at drop verdict for packet \
                 #{transmit_index} ({site})",
            )));
        }
        if !can_drop {
            self.push_new(Choice::PacketDrop {
                site: site.to_string(),
                transmit_index,
                decision: DropDecision::Delivered,
            });
            self.note_branch(site, DropDecision::Delivered.label());
            return Ok(DropDecision::Delivered);
        }
        let choice_id = self.next_choice_id();
        let options = [DropDecision::Delivered, DropDecision::Dropped]
            .into_iter()
            .map(|decision| ChoiceRecord {
                choice_id,
                choice: Choice::PacketDrop {
                    site: site.to_string(),
                    transmit_index,
                    decision,
                },
            })
            .collect();
        Err(Interrupt::Fork { options })
    }

    /// Force a symbolic byte to its witness value.
    ///
    /// Used whenever a byte's concrete value matters to the machine
    /// rather than to control flow: lengths, offsets, identifiers.
    pub fn concretize(&mut self, var: SymVarId) -> Result<u8, Interrupt> {
        self.concretization_events += 1;
        if self.cursor < self.pending.len() {
            let record = &self.pending[self.cursor];
            let expected = match &record.choice {
                Choice::Concretization { var: v, value } if *v == var.index() => *value,
                other => {
                    return Err(self.mismatch(format!(
                        "choice {} expects `{other}`, but the world concretized {var}",
                        record.choice_id,
                    )))
                }
            };
            let value = self.timed(|store| store.concretize(var));
            if value != expected {
                return Err(self.mismatch(format!(
                    "concretizing {var} yielded {value:#04x}, trace recorded {expected:#04x}",
                )));
            }
            self.cursor += 1;
            return Ok(value);
        }

        if let CtxMode::Replay { .. } = self.mode {
            return Err(self.mismatch(format!(
                "replay ran out of recorded choices at concretization of {var}",
            )));
        }
        let value = self.timed(|store| store.concretize(var));
        self.push_new(Choice::Concretization { var: var.index(), value });
        Ok(value)
    }

    /// Read a variable's current witness without narrowing its domain.
    ///
    /// This is how integrity tags are computed over payloads that
    /// still contain symbolic bytes: the hash sees the witness, later
    /// branching on those bytes stays possible. Counted as
    /// concretization work in the stats.
    pub fn witness_peek(&mut self, var: SymVarId) -> u8 {
        self.concretization_events += 1;
        self.timed(|store| store.witness(var))
    }

    /// Mark a probe point as visited on this path.
    pub fn probe(&mut self, id: &'static str) {
        assert!(
            self.probe_registry.contains(id),
            "probe `{id}` fired but was never declared in probe_points()"
        );
        if !self.coverage.contains(id) {
            self.coverage.insert(id.to_string());
        }
    }

    fn timed<T>(&mut self, f: impl FnOnce(&mut ConstraintStore) -> T) -> T {
        let t0 = Instant::now();
        let out = f(self.store);
        self.domain_time += t0.elapsed();
        out
    }

    fn next_choice_id(&self) -> u64 {
        self.base_choice_id + self.pending.len() as u64 + self.newly.len() as u64
    }

    fn push_new(&mut self, choice: Choice) {
        let choice_id = self.next_choice_id();
        self.newly.push(ChoiceRecord { choice_id, choice });
    }

    fn note_branch(&mut self, site: &'static str, label: &'static str) {
        let key = (site.to_string(), label.to_string());
        if !self.branch_hits.contains(&key) {
            self.branch_hits.insert(key);
        }
    }

    fn check_site(&self, site: &'static str) {
        assert!(
            self.site_registry.contains(site),
            "choice site `{site}` used but never declared in choice_sites()"
        );
    }

    fn mismatch(&self, detail: String) -> Interrupt {
        Interrupt::Mismatch { detail }
    }
}

fn branch_label(taken: bool) -> &'static str {
    if taken {
        "true"
    } else {
        "false"
    }
}

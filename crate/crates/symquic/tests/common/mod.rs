//! Helpers shared by the integration suites.

use symquic::explore::{
    run_scripted, Choice, DropDecision, Limits, PathResult, ScriptStep,
};
use symquic::harness::HarnessWorld;
use symquic::run::RunConfig;

/// All packet-fate decisions recorded along a path, in order.
pub fn drop_verdicts(path: &PathResult) -> Vec<DropDecision> {
    path.trace
        .iter()
        .filter_map(|r| match &r.choice {
            Choice::PacketDrop { decision, .. } => Some(*decision),
            _ => None,
        })
        .collect()
}

/// Transmit indices the path dropped, in order.
pub fn dropped_indices(path: &PathResult) -> Vec<u64> {
    path.trace
        .iter()
        .filter_map(|r| match &r.choice {
            Choice::PacketDrop { transmit_index, decision: DropDecision::Dropped, .. } => {
                Some(*transmit_index)
            }
            _ => None,
        })
        .collect()
}

/// Sort key identifying a path by its packet fates and ending.
pub fn fate_key(path: &PathResult) -> (Vec<DropDecision>, String) {
    (drop_verdicts(path), path.status.to_string())
}

/// Concretely re-execute every drop script the configuration can
/// consume: start from the empty script and, whenever a run asks for
/// one more verdict, restart it once per alternative. This walks the
/// same tree the engine explores, but by plain re-execution with no
/// forking machinery involved.
pub fn enumerate_drop_scripts(config: &RunConfig, limits: &Limits) -> Vec<PathResult> {
    let mut done = Vec::new();
    let mut agenda: Vec<Vec<DropDecision>> = vec![Vec::new()];
    while let Some(script) = agenda.pop() {
        let world = HarnessWorld::new(config.setup().expect("valid config"))
            .expect("defects fit the endpoints");
        match run_scripted(world, &script, limits).expect("drop scripts never fork") {
            ScriptStep::Complete(path) => done.push(*path),
            ScriptStep::NeedsDropVerdict { .. } => {
                for decision in [DropDecision::Delivered, DropDecision::Dropped] {
                    let mut next = script.clone();
                    next.push(decision);
                    agenda.push(next);
                }
            }
        }
    }
    done
}

//! A built-in two-branch program that shows the whole engine in
//! miniature.
//!
//! The program reads one symbolic byte `x` and branches twice:
//!
//! ```text
//! if x < 5    { return A }
//! if x >= 100 { return B }
//! return C
//! ```
//!
//! Of the four syntactic branch combinations, `{x < 5, x >= 100}` is
//! unsatisfiable, so exactly three paths exist. The engine proves that
//! by construction: the infeasible branch is never scheduled, and each
//! surviving path carries its constraint set and the smallest byte
//! that satisfies it.

use serde::Serialize;

use crate::explore::ctx::{Interrupt, StepCtx, StepStatus, World};
use crate::explore::engine::{explore, Limits, Strategy};
use crate::symval::{Predicate, SymVarId};

#[derive(Clone, Serialize)]
struct BranchDemo;

impl World for BranchDemo {
    fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<StepStatus, Interrupt> {
        let x = ctx.fresh_byte()?;
        if ctx.decide("demo.x_lt_5", Predicate::lt(x, 5))? {
            return Ok(StepStatus::FinishedOk);
        }
        ctx.decide("demo.x_ge_100", Predicate::ge(x, 100))?;
        Ok(StepStatus::FinishedOk)
    }

    fn choice_sites(&self) -> Vec<&'static str> {
        vec!["demo.x_lt_5", "demo.x_ge_100"]
    }

    fn probe_points(&self) -> Vec<&'static str> {
        vec![]
    }
}

/// One terminal path of the demo program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoPath {
    /// Human-readable constraint set, e.g. `["x >= 5", "x < 100"]`.
    pub constraints: Vec<String>,
    /// The smallest byte satisfying the constraints.
    pub witness: u8,
}

/// Run the demo program and return its three paths.
///
/// Uses breadth-first search so the paths come out in source order:
/// `{x < 5}`, `{x >= 5, x >= 100}`, `{x >= 5, x < 100}` with witnesses
/// 0, 100, and 5.
pub fn run_branch_demo() -> Vec<DemoPath> {
    let outcome = explore(BranchDemo, Strategy::Bfs, &Limits::default())
        .expect("the demo world is deterministic");
    let x = SymVarId::new(0);
    outcome
        .paths
        .iter()
        .map(|path| DemoPath {
            constraints: path
                .store
                .history()
                .iter()
                .filter(|entry| entry.pred.var == x)
                .map(|entry| entry.describe_named("x"))
                .collect(),
            witness: path.store.witness(x),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force check of one demo path: filter 0..=255 through the
    /// constraint set and take the minimum.
    fn brute_force_witness(constraints: &[String]) -> u8 {
        (0..=255u8)
            .filter(|b| {
                constraints.iter().all(|c| match c.as_str() {
                    "x < 5" => *b < 5,
                    "x >= 5" => *b >= 5,
                    "x >= 100" => *b >= 100,
                    "x < 100" => *b < 100,
                    other => panic!("unexpected constraint {other}"),
                })
            })
            .min()
            .expect("every emitted path is satisfiable")
    }

    #[test]
    fn demo_explores_exactly_three_paths() {
        let paths = run_branch_demo();
        assert_eq!(paths.len(), 3);
        let sets: Vec<Vec<String>> = paths.iter().map(|p| p.constraints.clone()).collect();
        assert_eq!(
            sets,
            vec![
                vec!["x < 5".to_string()],
                vec!["x >= 5".to_string(), "x >= 100".to_string()],
                vec!["x >= 5".to_string(), "x < 100".to_string()],
            ]
        );
    }

    #[test]
    fn demo_witnesses_are_minimal() {
        let paths = run_branch_demo();
        let witnesses: Vec<u8> = paths.iter().map(|p| p.witness).collect();
        assert_eq!(witnesses, vec![0, 100, 5]);
        for p in &paths {
            assert_eq!(p.witness, brute_force_witness(&p.constraints));
        }
    }
}

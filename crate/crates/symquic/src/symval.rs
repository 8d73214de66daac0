//! Single-byte symbolic values and their constraint domains.
//!
//! Every symbolic quantity in this crate is one unsigned byte. That
//! restriction is what lets us replace a general-purpose solver with
//! something trivially decidable: the set of values a byte can still
//! take is just a subset of `0..=255`, representable as a 256-bit set.
//! Assuming a predicate intersects that set; deciding a branch asks
//! which of the two intersections are non-empty; extracting a witness
//! takes the smallest remaining element.
//!
//! The model is deliberately unary: a predicate constrains exactly one
//! variable, so there is no constraint propagation between variables
//! and no search. `assume` is O(1) in the number of other variables,
//! and satisfiability is never approximate. What we give up is
//! expressiveness (no `x < y`), which the rest of the crate works
//! around by concretizing any byte whose value feeds into addressing,
//! lengths, or hashes.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of a symbolic byte variable.
///
/// Ids are dense: the first variable created in a run is 0, the next 1,
/// and so on. Allocation order is deterministic for a given
/// configuration, which test code relies on when it needs to find "the
/// byte that replaced position 0 of the first packet".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SymVarId(u32);

impl SymVarId {
    pub const fn new(index: u32) -> Self {
        SymVarId(index)
    }

    pub const fn index(self) -> u32 {
        self.0
    }
}

impl fmt::Display for SymVarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// The set of concrete values a symbolic byte may still take.
///
/// Backed by four 64-bit words, one bit per value. A domain is empty
/// only transiently inside `assume`; stores never retain a variable
/// with an empty domain.
#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteDomain([u64; 4]);

impl ByteDomain {
    /// Domain containing every byte value.
    pub const fn full() -> Self {
        ByteDomain([u64::MAX; 4])
    }

    pub const fn empty() -> Self {
        ByteDomain([0; 4])
    }

    pub fn singleton(value: u8) -> Self {
        let mut d = Self::empty();
        d.insert(value);
        d
    }

    pub fn insert(&mut self, value: u8) {
        self.0[(value >> 6) as usize] |= 1 << (value & 63);
    }

    pub fn contains(&self, value: u8) -> bool {
        self.0[(value >> 6) as usize] & (1 << (value & 63)) != 0
    }

    pub fn len(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0 == [0; 4]
    }

    pub fn intersect(&self, other: &ByteDomain) -> ByteDomain {
        ByteDomain([
            self.0[0] & other.0[0],
            self.0[1] & other.0[1],
            self.0[2] & other.0[2],
            self.0[3] & other.0[3],
        ])
    }

    /// Smallest value in the domain, if any. This is the witness rule:
    /// deterministic and independent of insertion history.
    pub fn min(&self) -> Option<u8> {
        for (i, word) in self.0.iter().enumerate() {
            if *word != 0 {
                return Some((i as u8) * 64 + word.trailing_zeros() as u8);
            }
        }
        None
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=255u8).filter(move |b| self.contains(*b))
    }
}

impl fmt::Debug for ByteDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let values: Vec<u8> = self.iter().collect();
        if values.len() > 8 {
            write!(
                f,
                "ByteDomain(|{}| min={:#04x})",
                values.len(),
                values[0]
            )
        } else {
            write!(f, "ByteDomain({values:#04x?})")
        }
    }
}

/// Comparison forms a predicate can take.
///
/// `MaskEq` is the odd one out: it constrains a bit pattern,
/// `(b & mask) == (constant & mask)`, and exists because packet headers
/// are full of flag bits and nibble patterns that equality alone cannot
/// express without enumerating values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateKind {
    Eq,
    Ne,
    Lt,
    Ge,
    MaskEq,
}

/// A unary constraint over a single symbolic byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub var: SymVarId,
    pub kind: PredicateKind,
    pub constant: u8,
    /// Only meaningful for `MaskEq`; zero otherwise.
    pub mask: u8,
}

impl Predicate {
    pub fn eq(var: SymVarId, constant: u8) -> Self {
        Predicate { var, kind: PredicateKind::Eq, constant, mask: 0 }
    }

    pub fn ne(var: SymVarId, constant: u8) -> Self {
        Predicate { var, kind: PredicateKind::Ne, constant, mask: 0 }
    }

    pub fn lt(var: SymVarId, constant: u8) -> Self {
        Predicate { var, kind: PredicateKind::Lt, constant, mask: 0 }
    }

    pub fn ge(var: SymVarId, constant: u8) -> Self {
        Predicate { var, kind: PredicateKind::Ge, constant, mask: 0 }
    }

    pub fn mask_eq(var: SymVarId, mask: u8, constant: u8) -> Self {
        Predicate { var, kind: PredicateKind::MaskEq, constant, mask }
    }

    /// Evaluate the predicate against a concrete byte.
    pub fn holds(&self, value: u8) -> bool {
        match self.kind {
            PredicateKind::Eq => value == self.constant,
            PredicateKind::Ne => value != self.constant,
            PredicateKind::Lt => value < self.constant,
            PredicateKind::Ge => value >= self.constant,
            PredicateKind::MaskEq => value & self.mask == self.constant & self.mask,
        }
    }

    /// The set of bytes satisfying the predicate (or its negation).
    ///
    /// Computed by direct enumeration of all 256 values. This is cheap,
    /// impossible to get subtly wrong, and doubles as the definition
    /// the property tests check richer code paths against.
    pub fn satisfying_set(&self, polarity: bool) -> ByteDomain {
        let mut d = ByteDomain::empty();
        for b in 0..=255u8 {
            if self.holds(b) == polarity {
                d.insert(b);
            }
        }
        d
    }

    /// Render as e.g. `v3 < 5` or `!(v0 & 0x0f == 0x0a)`.
    ///
    /// Negations of the comparison kinds are folded into their duals
    /// (`!(x < 5)` prints as `x >= 5`); only a negated `MaskEq` keeps
    /// an explicit `!`.
    pub fn describe(&self, polarity: bool) -> String {
        self.describe_named(&self.var.to_string(), polarity)
    }

    /// Like [`describe`](Self::describe), with a caller-chosen
    /// variable name.
    pub fn describe_named(&self, name: &str, polarity: bool) -> String {
        let c = self.constant;
        match (self.kind, polarity) {
            (PredicateKind::Eq, true) | (PredicateKind::Ne, false) => format!("{name} == {c}"),
            (PredicateKind::Eq, false) | (PredicateKind::Ne, true) => format!("{name} != {c}"),
            (PredicateKind::Lt, true) | (PredicateKind::Ge, false) => format!("{name} < {c}"),
            (PredicateKind::Lt, false) | (PredicateKind::Ge, true) => format!("{name} >= {c}"),
            (PredicateKind::MaskEq, pol) => {
                let base =
                    format!("{name} & {:#04x} == {:#04x}", self.mask, c & self.mask);
                if pol {
                    base
                } else {
                    format!("!({base})")
                }
            }
        }
    }
}

/// One applied constraint: a predicate together with the branch taken.
///
/// Storing the polarity instead of rewriting the predicate keeps the
/// history faithful to what the code under test actually asked, and
/// makes the negation of `MaskEq` representable without a sixth
/// predicate kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedPredicate {
    pub pred: Predicate,
    pub polarity: bool,
}

impl AppliedPredicate {
    pub fn describe(&self) -> String {
        self.pred.describe(self.polarity)
    }

    pub fn describe_named(&self, name: &str) -> String {
        self.pred.describe_named(name, self.polarity)
    }
}

/// Result of `assume`: either a store extended with the constraint, or
/// proof that the constraint is unsatisfiable against the current
/// domain.
#[derive(Debug)]
pub enum Feasibility {
    Sat(ConstraintStore),
    Unsat,
}

impl Feasibility {
    pub fn is_sat(&self) -> bool {
        matches!(self, Feasibility::Sat(_))
    }
}

/// All constraint state for one execution path.
///
/// A store is a value: forking an execution clones it, and the clones
/// never observe each other. The invariant tying the fields together is
/// that `domains[v]` always equals the full domain filtered through
/// every history entry mentioning `v`; `check_consistency` verifies
/// exactly that by re-enumeration, and the property tests keep it
/// honest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintStore {
    domains: Vec<ByteDomain>,
    history: Vec<AppliedPredicate>,
    concretized: BTreeSet<SymVarId>,
}

impl Default for ConstraintStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ConstraintStore {
    pub fn new() -> Self {
        ConstraintStore {
            domains: Vec::new(),
            history: Vec::new(),
            concretized: BTreeSet::new(),
        }
    }

    /// Allocate a fresh variable with the full 256-value domain.
    pub fn fresh_var(&mut self) -> SymVarId {
        let id = SymVarId(self.domains.len() as u32);
        self.domains.push(ByteDomain::full());
        id
    }

    pub fn var_count(&self) -> u32 {
        self.domains.len() as u32
    }

    pub fn domain(&self, var: SymVarId) -> &ByteDomain {
        self.domains
            .get(var.index() as usize)
            .unwrap_or_else(|| panic!("unknown symbolic variable {var}"))
    }

    pub fn history(&self) -> &[AppliedPredicate] {
        &self.history
    }

    pub fn is_concretized(&self, var: SymVarId) -> bool {
        self.concretized.contains(&var)
    }

    pub fn concretized_vars(&self) -> impl Iterator<Item = SymVarId> + '_ {
        self.concretized.iter().copied()
    }

    /// Add a constraint, returning the extended store or `Unsat`.
    ///
    /// On `Unsat` the original store is untouched (this takes `&self`),
    /// so an infeasible branch costs nothing but the intersection.
    /// Asking about a variable the store has never seen is a caller bug
    /// and panics.
    pub fn assume(&self, pred: &Predicate, polarity: bool) -> Feasibility {
        let current = self.domain(pred.var);
        let narrowed = current.intersect(&pred.satisfying_set(polarity));
        if narrowed.is_empty() {
            return Feasibility::Unsat;
        }
        let mut next = self.clone();
        next.domains[pred.var.index() as usize] = narrowed;
        next.history.push(AppliedPredicate { pred: *pred, polarity });
        Feasibility::Sat(next)
    }

    /// In-place variant of `assume` used on hot paths. Returns false
    /// (leaving the store unchanged) when the constraint is infeasible.
    pub fn apply(&mut self, pred: &Predicate, polarity: bool) -> bool {
        let current = self.domain(pred.var);
        let narrowed = current.intersect(&pred.satisfying_set(polarity));
        if narrowed.is_empty() {
            return false;
        }
        self.domains[pred.var.index() as usize] = narrowed;
        self.history.push(AppliedPredicate { pred: *pred, polarity });
        true
    }

    /// Split the store along a predicate.
    ///
    /// Returns only the feasible branches, true-branch first. The
    /// result is never empty: the two satisfying sets partition
    /// `0..=255`, so a non-empty input domain intersects at least one
    /// of them.
    pub fn decide(&self, pred: &Predicate) -> Vec<(bool, ConstraintStore)> {
        let mut branches = Vec::with_capacity(2);
        if let Feasibility::Sat(s) = self.assume(pred, true) {
            branches.push((true, s));
        }
        if let Feasibility::Sat(s) = self.assume(pred, false) {
            branches.push((false, s));
        }
        assert!(
            !branches.is_empty(),
            "decide on {} produced no feasible branch",
            pred.describe(true)
        );
        branches
    }

    /// The deterministic concrete stand-in for a variable: the smallest
    /// value its domain still permits.
    pub fn witness(&self, var: SymVarId) -> u8 {
        self.domain(var)
            .min()
            .unwrap_or_else(|| panic!("empty domain for {var}"))
    }

    /// Collapse a variable to its witness and remember that it was
    /// forced. Idempotent: a second call returns the same byte without
    /// growing the history.
    pub fn concretize(&mut self, var: SymVarId) -> u8 {
        let value = self.witness(var);
        if self.concretized.insert(var) {
            self.domains[var.index() as usize] = ByteDomain::singleton(value);
            self.history.push(AppliedPredicate {
                pred: Predicate::eq(var, value),
                polarity: true,
            });
        }
        value
    }

    /// Final value of every variable on this path, keyed by index.
    pub fn witnesses(&self) -> std::collections::BTreeMap<u32, u8> {
        (0..self.var_count())
            .map(|i| (i, self.witness(SymVarId(i))))
            .collect()
    }

    /// Recompute every domain from scratch and compare. Test support;
    /// O(vars * history * 256).
    pub fn check_consistency(&self) -> Result<(), String> {
        for index in 0..self.var_count() {
            let var = SymVarId(index);
            let mut expected = ByteDomain::full();
            for entry in &self.history {
                if entry.pred.var == var {
                    expected = expected.intersect(&entry.pred.satisfying_set(entry.polarity));
                }
            }
            if expected != self.domains[index as usize] {
                return Err(format!(
                    "domain of {var} diverges from history: {:?} vs {:?}",
                    self.domains[index as usize], expected
                ));
            }
            if self.domains[index as usize].is_empty() {
                return Err(format!("retained empty domain for {var}"));
            }
        }
        Ok(())
    }

    /// Constraints on one variable, rendered for reports.
    pub fn describe_var(&self, var: SymVarId) -> Vec<String> {
        self.history
            .iter()
            .filter(|e| e.pred.var == var)
            .map(|e| e.pred.describe(e.polarity))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: filter 0..=255 through a list of applied
    /// predicates the slow way.
    fn brute_force_domain(history: &[AppliedPredicate], var: SymVarId) -> Vec<u8> {
        (0..=255u8)
            .filter(|b| {
                history
                    .iter()
                    .filter(|e| e.pred.var == var)
                    .all(|e| e.pred.holds(*b) == e.polarity)
            })
            .collect()
    }

    #[test]
    fn lt_narrows_to_prefix() {
        let mut store = ConstraintStore::new();
        let v = store.fresh_var();
        let store = match store.assume(&Predicate::lt(v, 5), true) {
            Feasibility::Sat(s) => s,
            Feasibility::Unsat => panic!("v < 5 must be feasible on a full domain"),
        };
        let values: Vec<u8> = store.domain(v).iter().collect();
        assert_eq!(values, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn contradiction_is_unsat_and_preserves_store() {
        let mut store = ConstraintStore::new();
        let v = store.fresh_var();
        let store = match store.assume(&Predicate::lt(v, 5), true) {
            Feasibility::Sat(s) => s,
            Feasibility::Unsat => unreachable!(),
        };
        let before = store.clone();
        assert!(!store.assume(&Predicate::ge(v, 100), true).is_sat());
        assert_eq!(store, before);
    }

    #[test]
    fn mask_eq_low_nibble_enumerates_sixteen_values() {
        let mut store = ConstraintStore::new();
        let v = store.fresh_var();
        let store = match store.assume(&Predicate::mask_eq(v, 0x0f, 0x0a), true) {
            Feasibility::Sat(s) => s,
            Feasibility::Unsat => unreachable!(),
        };
        let got: Vec<u8> = store.domain(v).iter().collect();
        let expected: Vec<u8> = (0..=255u8).filter(|b| b & 0x0f == 0x0a).collect();
        assert_eq!(got, expected);
        assert_eq!(got.len(), 16);
        assert_eq!(got[0], 0x0a);
        assert_eq!(*got.last().unwrap(), 0xfa);
    }

    #[test]
    fn decide_returns_true_branch_first_and_partitions() {
        let mut store = ConstraintStore::new();
        let v = store.fresh_var();
        let branches = store.decide(&Predicate::lt(v, 5));
        assert_eq!(branches.len(), 2);
        assert!(branches[0].0);
        assert!(!branches[1].0);
        let union: u32 = branches.iter().map(|(_, s)| s.domain(v).len()).sum();
        assert_eq!(union, store.domain(v).len());
    }

    #[test]
    fn decide_drops_infeasible_branch() {
        let mut store = ConstraintStore::new();
        let v = store.fresh_var();
        let store = match store.assume(&Predicate::lt(v, 5), true) {
            Feasibility::Sat(s) => s,
            Feasibility::Unsat => unreachable!(),
        };
        // v >= 100 cannot hold below 5, so only the false branch remains.
        let branches = store.decide(&Predicate::ge(v, 100));
        assert_eq!(branches.len(), 1);
        assert!(!branches[0].0);
        assert_eq!(branches[0].1.domain(v).len(), 5);
    }

    #[test]
    fn witness_is_minimum() {
        let mut store = ConstraintStore::new();
        let v = store.fresh_var();
        assert_eq!(store.witness(v), 0);
        let store = match store.assume(&Predicate::ge(v, 100), true) {
            Feasibility::Sat(s) => s,
            Feasibility::Unsat => unreachable!(),
        };
        assert_eq!(store.witness(v), 100);
    }

    #[test]
    fn concretize_collapses_and_is_idempotent() {
        let mut store = ConstraintStore::new();
        let v = store.fresh_var();
        let mut store = match store.assume(&Predicate::ge(v, 7), true) {
            Feasibility::Sat(s) => s,
            Feasibility::Unsat => unreachable!(),
        };
        let first = store.concretize(v);
        assert_eq!(first, 7);
        assert_eq!(store.domain(v).len(), 1);
        let history_len = store.history().len();
        let second = store.concretize(v);
        assert_eq!(second, 7);
        assert_eq!(store.history().len(), history_len);
        store.check_consistency().unwrap();
    }

    #[test]
    fn unknown_variable_panics() {
        let store = ConstraintStore::new();
        let stray = SymVarId::new(3);
        let outcome = std::panic::catch_unwind(|| store.witness(stray));
        assert!(outcome.is_err());
    }

    #[test]
    fn domains_match_brute_force_after_mixed_history() {
        let mut store = ConstraintStore::new();
        let a = store.fresh_var();
        let b = store.fresh_var();
        let steps = [
            (Predicate::ge(a, 0x20), true),
            (Predicate::mask_eq(a, 0x01, 0x01), false),
            (Predicate::lt(b, 0xf0), true),
            (Predicate::ne(b, 0x10), true),
        ];
        let mut current = store;
        for (pred, pol) in steps {
            current = match current.assume(&pred, pol) {
                Feasibility::Sat(s) => s,
                Feasibility::Unsat => panic!("unexpected unsat"),
            };
        }
        for var in [a, b] {
            let expected = brute_force_domain(current.history(), var);
            let got: Vec<u8> = current.domain(var).iter().collect();
            assert_eq!(got, expected);
        }
        current.check_consistency().unwrap();
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_pred(var_count: u32) -> impl Strategy<Value = Predicate> {
            (0..var_count, 0u8..=255, 0u8..=255, 0usize..5).prop_map(
                |(v, constant, mask, kind)| {
                    let var = SymVarId::new(v);
                    match kind {
                        0 => Predicate::eq(var, constant),
                        1 => Predicate::ne(var, constant),
                        2 => Predicate::lt(var, constant),
                        3 => Predicate::ge(var, constant),
                        _ => Predicate::mask_eq(var, mask, constant),
                    }
                },
            )
        }

        proptest! {
            /// Domains always equal the brute-force filter of the
            /// history, no matter what sequence of assumptions and
            /// concretizations got us here.
            #[test]
            fn domain_equals_history_filter(
                preds in proptest::collection::vec((arb_pred(3), any::<bool>()), 0..12),
                concretize_at in proptest::collection::vec(0u32..3, 0..3),
            ) {
                let mut store = ConstraintStore::new();
                for _ in 0..3 {
                    store.fresh_var();
                }
                let mut current = store;
                let mut concretized = concretize_at.into_iter();
                for (pred, pol) in preds {
                    if let Feasibility::Sat(next) = current.assume(&pred, pol) {
                        current = next;
                    }
                    if let Some(v) = concretized.next() {
                        current.concretize(SymVarId::new(v));
                    }
                }
                prop_assert!(current.check_consistency().is_ok());
            }

            /// `decide` branch domains partition the parent domain.
            #[test]
            fn decide_partitions_domain(
                setup in proptest::collection::vec((arb_pred(1), any::<bool>()), 0..6),
                split in arb_pred(1),
            ) {
                let mut store = ConstraintStore::new();
                store.fresh_var();
                let mut current = store;
                for (pred, pol) in setup {
                    if let Feasibility::Sat(next) = current.assume(&pred, pol) {
                        current = next;
                    }
                }
                let var = split.var;
                let parent: Vec<u8> = current.domain(var).iter().collect();
                let branches = current.decide(&split);
                let mut union: Vec<u8> = branches
                    .iter()
                    .flat_map(|(_, s)| s.domain(var).iter().collect::<Vec<_>>())
                    .collect();
                union.sort_unstable();
                prop_assert_eq!(union, parent);
            }
        }
    }
}

//! Durable artifacts of exploration: choice traces, fault signatures,
//! and replayable test cases.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::symval::Predicate;

/// What the channel did with one transmitted packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropDecision {
    Delivered,
    Dropped,
}

impl DropDecision {
    pub fn label(self) -> &'static str {
        match self {
            DropDecision::Delivered => "delivered",
            DropDecision::Dropped => "dropped",
        }
    }
}

/// One choice made along a path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Choice {
    /// A symbolic branch: which way a predicate went.
    PredicateBranch {
        site: String,
        pred: Predicate,
        taken: bool,
    },
    /// The channel's verdict on the n-th transmitted packet.
    PacketDrop {
        site: String,
        transmit_index: u64,
        decision: DropDecision,
    },
    /// A symbolic byte forced to its witness value.
    Concretization { var: u32, value: u8 },
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::PredicateBranch { site, pred, taken } => {
                write!(f, "{site}: {}", pred.describe(*taken))
            }
            Choice::PacketDrop { site, transmit_index, decision } => {
                write!(f, "{site}: packet #{transmit_index} {}", decision.label())
            }
            Choice::Concretization { var, value } => {
                write!(f, "concretize v{var} = {value:#04x}")
            }
        }
    }
}

/// A [`Choice`] stamped with its position in the path.
///
/// `choice_id` equals the record's index in the trace: ids are
/// strictly increasing from zero with no gaps, which the engine
/// asserts every time it commits a step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub choice_id: u64,
    #[serde(flatten)]
    pub choice: Choice,
}

/// Which side of the interop setup a fault was observed on.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Client,
    Server,
    Channel,
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Party::Client => "client",
            Party::Server => "server",
            Party::Channel => "channel",
        };
        f.write_str(s)
    }
}

/// The category of a detected fault.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// The two endpoints finished with incompatible views of the
    /// session.
    InteropDivergence,
    /// Both sides agree, but the application scenario never completed
    /// even though nothing interfered.
    ScenarioUnfulfilled,
    /// An endpoint accepted input in a lifecycle phase that forbids it.
    LifecycleFault,
    /// An endpoint's internal guard tripped: it reached code that its
    /// own preconditions say is unreachable.
    GuardFault,
    /// An endpoint attempted an illegal phase transition.
    InvalidTransition,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FaultKind::InteropDivergence => "interop_divergence",
            FaultKind::ScenarioUnfulfilled => "scenario_unfulfilled",
            FaultKind::LifecycleFault => "lifecycle_fault",
            FaultKind::GuardFault => "guard_fault",
            FaultKind::InvalidTransition => "invalid_transition",
        };
        f.write_str(s)
    }
}

/// Identity of a fault for deduplication.
///
/// Two error paths count as "the same error" exactly when all four
/// fields agree. The unique-error metric in reports is the number of
/// distinct signatures.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FaultSignature {
    pub kind: FaultKind,
    pub endpoint: Party,
    /// Probe point nearest the detection site.
    pub probe: String,
    /// Name of the seeded defect that explains the fault, when the
    /// detecting code can tell.
    pub defect_tag: Option<String>,
}

impl fmt::Display for FaultSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}/{}", self.kind, self.endpoint, self.probe)?;
        if let Some(tag) = &self.defect_tag {
            write!(f, " (defect {tag})")?;
        }
        Ok(())
    }
}

/// Terminal status of one explored path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PathStatus {
    FinishedOk,
    FinishedError { fault: FaultSignature },
    /// The per-path step limit or the global time limit cut this path
    /// off before it terminated on its own.
    LimitExceeded,
}

impl PathStatus {
    pub fn fault(&self) -> Option<&FaultSignature> {
        match self {
            PathStatus::FinishedError { fault } => Some(fault),
            _ => None,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, PathStatus::FinishedOk)
    }

    pub fn is_error(&self) -> bool {
        matches!(self, PathStatus::FinishedError { .. })
    }
}

impl fmt::Display for PathStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathStatus::FinishedOk => f.write_str("ok"),
            PathStatus::FinishedError { fault } => write!(f, "error: {fault}"),
            PathStatus::LimitExceeded => f.write_str("limit exceeded"),
        }
    }
}

/// A self-contained, replayable record of one explored path.
///
/// Serialized as JSON with an explicit format version (`tcfmt`) so
/// stored cases from older runs fail loudly instead of replaying
/// nonsense. The file carries everything needed to rebuild the run:
/// which scenario and configuration, which defects were armed, the
/// full choice trace, and the witness byte for every symbolic
/// variable the path created.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub tcfmt: u32,
    pub scenario: String,
    pub config: String,
    pub defects: Vec<String>,
    pub choices: Vec<ChoiceRecord>,
    pub witnesses: BTreeMap<u32, u8>,
    pub outcome: PathStatus,
}

#[derive(Debug, Error)]
pub enum TestCaseError {
    #[error("malformed test case: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported test case format {found} (supported: {})", TestCase::FORMAT)]
    UnsupportedFormat { found: u32 },
}

impl TestCase {
    pub const FORMAT: u32 = 1;

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("test cases always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<TestCase, TestCaseError> {
        let tc: TestCase = serde_json::from_str(text)?;
        if tc.tcfmt != Self::FORMAT {
            return Err(TestCaseError::UnsupportedFormat { found: tc.tcfmt });
        }
        Ok(tc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symval::SymVarId;

    fn sample_case() -> TestCase {
        TestCase {
            tcfmt: TestCase::FORMAT,
            scenario: "s1".into(),
            config: "sym-drop".into(),
            defects: vec!["d1".into()],
            choices: vec![
                ChoiceRecord {
                    choice_id: 0,
                    choice: Choice::PredicateBranch {
                        site: "demo.site".into(),
                        pred: Predicate::lt(SymVarId::new(0), 5),
                        taken: false,
                    },
                },
                ChoiceRecord {
                    choice_id: 1,
                    choice: Choice::PacketDrop {
                        site: "channel.verdict".into(),
                        transmit_index: 0,
                        decision: DropDecision::Dropped,
                    },
                },
                ChoiceRecord {
                    choice_id: 2,
                    choice: Choice::Concretization { var: 0, value: 5 },
                },
            ],
            witnesses: [(0u32, 5u8)].into_iter().collect(),
            outcome: PathStatus::FinishedError {
                fault: FaultSignature {
                    kind: FaultKind::InteropDivergence,
                    endpoint: Party::Client,
                    probe: "client.terminal".into(),
                    defect_tag: Some("d1".into()),
                },
            },
        }
    }

    #[test]
    fn test_case_roundtrips_through_json() {
        let tc = sample_case();
        let json = tc.to_json();
        let back = TestCase::from_json(&json).unwrap();
        assert_eq!(back, tc);
    }

    #[test]
    fn unknown_format_is_rejected() {
        let mut tc = sample_case();
        tc.tcfmt = 99;
        let err = TestCase::from_json(&tc.to_json()).unwrap_err();
        assert!(matches!(err, TestCaseError::UnsupportedFormat { found: 99 }));
    }

    #[test]
    fn witness_keys_serialize_as_strings() {
        let json = sample_case().to_json();
        assert!(json.contains("\"witnesses\""));
        assert!(json.contains("\"0\": 5"));
    }

    #[test]
    fn signature_equality_is_field_wise() {
        let a = FaultSignature {
            kind: FaultKind::GuardFault,
            endpoint: Party::Server,
            probe: "server.dispatch".into(),
            defect_tag: None,
        };
        let mut b = a.clone();
        assert_eq!(a, b);
        b.defect_tag = Some("d5".into());
        assert_ne!(a, b);
    }
}

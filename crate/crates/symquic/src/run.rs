//! End-to-end campaign driver: the named configurations, exploration
//! over the interop harness, test-case emission, error deduplication,
//! and concrete replay of recorded cases.
//!
//! A configuration names which input dimension becomes symbolic and
//! pins everything that choice forces; the remaining knobs (scenario
//! override, implementation pair, defects, strategy, limits) stay
//! free. [`run`] explores every path the configuration reaches and
//! turns each into a [`TestCase`]; [`replay`] re-executes one case
//! concretely and verifies it reproduces the recorded outcome.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelConfig, DropMode};
use crate::explore::{
    explore, replay_path, ExploreOutcome, FaultSignature, Limits, PathResult, PathStatus,
    ReplayError, Strategy, TestCase,
};
use crate::harness::{HarnessSetup, HarnessWorld, ScenarioChoice};
use crate::miniquic::{DefectError, DefectSet, ImplKind, Scenario};

/// The named symbolic-input configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfigName {
    /// The scenario selector is symbolic; the channel stays passive.
    SymStream,
    /// The client's proposed version bytes are symbolic.
    SymVersion,
    /// Packet fates are symbolic under a drop budget.
    SymDrop,
    /// The first K bytes of every datagram are symbolic.
    SymMod(usize),
}

impl ConfigName {
    /// Prefix widths accepted for sym-mod runs.
    pub const MOD_PREFIXES: [usize; 3] = [1, 5, 10];
}

impl fmt::Display for ConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigName::SymStream => write!(f, "sym-stream"),
            ConfigName::SymVersion => write!(f, "sym-version"),
            ConfigName::SymDrop => write!(f, "sym-drop"),
            ConfigName::SymMod(k) => write!(f, "sym-mod-{k}"),
        }
    }
}

impl FromStr for ConfigName {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<ConfigName, ConfigError> {
        match text {
            "sym-stream" => return Ok(ConfigName::SymStream),
            "sym-version" => return Ok(ConfigName::SymVersion),
            "sym-drop" => return Ok(ConfigName::SymDrop),
            _ => {}
        }
        let unknown = || ConfigError::UnknownConfig(text.to_string());
        let k = text.strip_prefix("sym-mod-").ok_or_else(unknown)?;
        let k: usize = k.parse().map_err(|_| unknown())?;
        if !Self::MOD_PREFIXES.contains(&k) {
            return Err(unknown());
        }
        Ok(ConfigName::SymMod(k))
    }
}

/// A run request that cannot be assembled into a world.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(
        "unknown configuration {0:?}; expected sym-stream, sym-version, \
         sym-drop, or sym-mod-K with K one of 1, 5, 10"
    )]
    UnknownConfig(String),
    #[error("sym-stream explores all scenarios itself; drop the explicit scenario")]
    ScenarioForced,
    #[error("unknown scenario {0:?}; expected s1, s2, or s3")]
    UnknownScenario(String),
    #[error(transparent)]
    Defect(#[from] DefectError),
}

/// A fully resolved run request.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub name: ConfigName,
    /// Scenario override; `None` takes the configuration's default.
    /// Everything except sym-stream defaults to S3; sym-stream always
    /// explores all three and rejects an override.
    pub scenario: Option<Scenario>,
    pub client_impl: ImplKind,
    pub server_impl: ImplKind,
    /// Defects to arm; each lands on whichever endpoint it applies to.
    pub defects: DefectSet,
    pub strategy: Strategy,
    pub limits: Limits,
    /// Drop budget for sym-drop runs.
    pub max_drops: u32,
}

impl RunConfig {
    /// A configuration over the default endpoint pair with everything
    /// else at its defaults.
    pub fn new(name: ConfigName) -> RunConfig {
        RunConfig {
            name,
            scenario: None,
            client_impl: ImplKind::Pull,
            server_impl: ImplKind::EventLoop,
            defects: DefectSet::NONE,
            strategy: Strategy::Dfs,
            limits: Limits::default(),
            max_drops: 1,
        }
    }

    /// The harness setup this configuration forces.
    pub fn setup(&self) -> Result<HarnessSetup, ConfigError> {
        let scenario = match self.name {
            ConfigName::SymStream => {
                if self.scenario.is_some() {
                    return Err(ConfigError::ScenarioForced);
                }
                ScenarioChoice::Symbolic
            }
            _ => ScenarioChoice::Fixed(self.scenario.unwrap_or(Scenario::S3)),
        };
        let channel = match self.name {
            ConfigName::SymStream | ConfigName::SymVersion => ChannelConfig::passive(),
            ConfigName::SymDrop => ChannelConfig {
                drop_mode: DropMode::Symbolic { max_drops: self.max_drops },
                mod_prefix: 0,
            },
            ConfigName::SymMod(k) => {
                ChannelConfig { drop_mode: DropMode::Off, mod_prefix: k }
            }
        };
        let (client_defects, server_defects) =
            self.defects.split_for_pair(self.client_impl, self.server_impl)?;
        Ok(HarnessSetup {
            client_impl: self.client_impl,
            server_impl: self.server_impl,
            client_defects,
            server_defects,
            scenario,
            symbolic_version: matches!(self.name, ConfigName::SymVersion),
            channel,
        })
    }
}

/// Aggregate counters for one run, one field per report column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStats {
    pub steps_per_second: f64,
    pub wall_time_s: f64,
    pub paths_total: usize,
    pub paths_ok: usize,
    pub paths_error: usize,
    pub paths_limit: usize,
    pub probe_coverage_pct: f64,
    pub branch_coverage_pct: f64,
    pub domain_time_pct: f64,
    pub max_live_states: usize,
    pub concretizations: u64,
    pub unique_errors: usize,
}

/// Everything one run produced.
#[derive(Debug)]
pub struct RunReport {
    pub stats: RunStats,
    /// One representative test case per distinct fault signature,
    /// ordered by signature. The representative is the first path
    /// that hit the signature in exploration order.
    pub errors: Vec<(FaultSignature, TestCase)>,
    /// One test case per explored path, in exploration order.
    pub all_cases: Vec<TestCase>,
    /// The raw exploration outcome, for callers that need traces or
    /// final world snapshots.
    pub exploration: ExploreOutcome,
}

/// Explore one configuration to completion or limits.
pub fn run(config: &RunConfig) -> Result<RunReport, ConfigError> {
    let world = HarnessWorld::new(config.setup()?)?;
    let exploration = explore(world, config.strategy, &config.limits)
        .expect("the interop harness is deterministic");

    let all_cases: Vec<TestCase> =
        exploration.paths.iter().map(|p| case_for(config, p)).collect();

    let mut unique: BTreeMap<FaultSignature, TestCase> = BTreeMap::new();
    for (path, case) in exploration.paths.iter().zip(&all_cases) {
        if let Some(fault) = path.status.fault() {
            unique.entry(fault.clone()).or_insert_with(|| case.clone());
        }
    }
    let errors: Vec<(FaultSignature, TestCase)> = unique.into_iter().collect();

    let stats = RunStats {
        steps_per_second: exploration.steps_per_second(),
        wall_time_s: exploration.wall.as_secs_f64(),
        paths_total: exploration.paths.len(),
        paths_ok: exploration.paths_ok(),
        paths_error: exploration.paths_error(),
        paths_limit: exploration.paths_limit(),
        probe_coverage_pct: exploration.probe_coverage_pct(),
        branch_coverage_pct: exploration.branch_coverage_pct(),
        domain_time_pct: exploration.domain_time_pct(),
        max_live_states: exploration.max_live_states,
        concretizations: exploration.concretizations,
        unique_errors: errors.len(),
    };

    Ok(RunReport { stats, errors, all_cases, exploration })
}

fn case_for(config: &RunConfig, path: &PathResult) -> TestCase {
    let scenario = match config.name {
        ConfigName::SymStream => HarnessWorld::from_snapshot(path.final_world.clone())
            .ok()
            .and_then(|w| w.scenario())
            .map_or_else(|| "none".to_string(), |s| s.name().to_string()),
        _ => config.scenario.unwrap_or(Scenario::S3).name().to_string(),
    };
    TestCase {
        tcfmt: TestCase::FORMAT,
        scenario,
        config: config.name.to_string(),
        defects: config.defects.tags().iter().map(|t| t.to_string()).collect(),
        choices: path.trace.clone(),
        witnesses: path.witnesses(),
        outcome: path.status.clone(),
    }
}

/// Context a replay needs beyond what the case file records: the
/// implementation pair and drop budget of the original run.
#[derive(Debug, Clone)]
pub struct ReplayContext {
    pub client_impl: ImplKind,
    pub server_impl: ImplKind,
    pub max_drops: u32,
    pub limits: Limits,
}

impl Default for ReplayContext {
    fn default() -> Self {
        ReplayContext {
            client_impl: ImplKind::Pull,
            server_impl: ImplKind::EventLoop,
            max_drops: 1,
            limits: Limits::default(),
        }
    }
}

/// Why a replay could not be carried out.
#[derive(Debug, Error)]
pub enum ReplayFailure {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Diverged(#[from] ReplayError),
}

/// What replaying a case established.
#[derive(Debug)]
pub enum ReplayOutcome {
    /// The replay ended exactly as recorded.
    Reproduced(Box<PathResult>),
    /// The replay ran the full trace but ended differently, which
    /// means the world no longer matches the recording (for example,
    /// a defect flag changed).
    OutcomeChanged { recorded: PathStatus, replayed: Box<PathResult> },
}

/// Re-execute a recorded test case concretely, with no forking.
///
/// The world is rebuilt from the case's configuration, scenario, and
/// defect fields plus the caller's context, then driven through the
/// recorded choices with every symbolic byte bound to its witness.
pub fn replay(case: &TestCase, context: &ReplayContext) -> Result<ReplayOutcome, ReplayFailure> {
    let name: ConfigName = case.config.parse()?;
    let mut config = RunConfig::new(name);
    config.client_impl = context.client_impl;
    config.server_impl = context.server_impl;
    config.max_drops = context.max_drops;
    config.limits = context.limits.clone();
    config.defects = DefectSet::parse(&case.defects.join(",")).map_err(ConfigError::from)?;
    if !matches!(name, ConfigName::SymStream) {
        let scenario = Scenario::parse(&case.scenario)
            .ok_or_else(|| ConfigError::UnknownScenario(case.scenario.clone()))?;
        config.scenario = Some(scenario);
    }

    let world = HarnessWorld::new(config.setup()?).map_err(ConfigError::from)?;
    let result = replay_path(world, &case.choices, &case.witnesses, &config.limits)?;
    if result.status == case.outcome {
        Ok(ReplayOutcome::Reproduced(Box::new(result)))
    } else {
        Ok(ReplayOutcome::OutcomeChanged {
            recorded: case.outcome.clone(),
            replayed: Box::new(result),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explore::FaultKind;

    #[test]
    fn config_names_round_trip() {
        for text in ["sym-stream", "sym-version", "sym-drop", "sym-mod-1", "sym-mod-10"] {
            let name: ConfigName = text.parse().expect("valid name");
            assert_eq!(name.to_string(), text);
        }
        assert!("sym-mod-7".parse::<ConfigName>().is_err());
        assert!("sym-flood".parse::<ConfigName>().is_err());
    }

    #[test]
    fn sym_stream_rejects_a_scenario_override() {
        let mut config = RunConfig::new(ConfigName::SymStream);
        config.scenario = Some(Scenario::S2);
        assert!(matches!(config.setup(), Err(ConfigError::ScenarioForced)));
    }

    #[test]
    fn misplaced_defects_are_a_config_error() {
        let mut config = RunConfig::new(ConfigName::SymStream);
        config.server_impl = ImplKind::Pull;
        config.defects = DefectSet { d2: true, ..DefectSet::NONE };
        assert!(matches!(config.setup(), Err(ConfigError::Defect(_))));
    }

    #[test]
    fn clean_sym_stream_explores_three_paths_without_errors() {
        let report = run(&RunConfig::new(ConfigName::SymStream)).expect("valid config");
        assert_eq!(report.stats.paths_total, 3);
        assert_eq!(report.stats.paths_ok, 3);
        assert_eq!(report.stats.unique_errors, 0);
        assert_eq!(report.all_cases.len(), 3);
        let stats = &report.stats;
        assert_eq!(
            stats.paths_total,
            stats.paths_ok + stats.paths_error + stats.paths_limit
        );
        let mut scenarios: Vec<&str> =
            report.all_cases.iter().map(|c| c.scenario.as_str()).collect();
        scenarios.sort_unstable();
        assert_eq!(scenarios, ["s1", "s2", "s3"]);
    }

    #[test]
    fn sym_stream_with_d1_d2_reports_two_unique_errors() {
        let mut config = RunConfig::new(ConfigName::SymStream);
        config.defects = DefectSet { d1: true, d2: true, ..DefectSet::NONE };
        let report = run(&config).expect("valid config");
        assert_eq!(report.stats.unique_errors, 2, "{:?}", report.errors);
        let kinds: Vec<FaultKind> = report.errors.iter().map(|(sig, _)| sig.kind).collect();
        assert!(kinds.contains(&FaultKind::InteropDivergence), "{kinds:?}");
        assert!(kinds.contains(&FaultKind::LifecycleFault), "{kinds:?}");
    }

    #[test]
    fn max_paths_one_emits_exactly_one_case() {
        let mut config = RunConfig::new(ConfigName::SymStream);
        config.limits.max_paths = 1;
        let report = run(&config).expect("valid config");
        assert_eq!(report.all_cases.len(), 1);
    }

    #[test]
    fn sym_version_with_d3_accepts_a_reserved_version() {
        let mut config = RunConfig::new(ConfigName::SymVersion);
        config.defects = DefectSet { d3: true, ..DefectSet::NONE };
        let report = run(&config).expect("valid config");
        assert!(report.stats.unique_errors >= 1, "{:?}", report.stats);
        let reserved = report.errors.iter().find_map(|(_, case)| {
            let version: Vec<u8> =
                (0..4).map(|v| *case.witnesses.get(&v).expect("version byte")).collect();
            version.iter().all(|b| b & 0x0f == 0x0a).then_some(version)
        });
        assert!(reserved.is_some(), "{:?}", report.errors);
    }

    #[test]
    fn sym_version_without_d3_completes_every_version_class() {
        let report = run(&RunConfig::new(ConfigName::SymVersion)).expect("valid config");
        assert_eq!(report.stats.unique_errors, 0, "{:?}", report.errors);
        assert!(report.stats.paths_total > 1);
        assert_eq!(report.stats.paths_ok, report.stats.paths_total);
    }

    #[test]
    fn sym_mod_with_d5_reaches_the_bogus_dispatch_slot() {
        let mut config = RunConfig::new(ConfigName::SymMod(10));
        config.defects = DefectSet { d5: true, ..DefectSet::NONE };
        config.limits.max_paths = 64;
        let report = run(&config).expect("valid config");
        let guard = report
            .errors
            .iter()
            .find(|(sig, _)| sig.kind == FaultKind::GuardFault)
            .expect("dispatch fault within the path budget");
        assert_eq!(guard.0.defect_tag.as_deref(), Some("d5"));
    }

    #[test]
    fn replay_reproduces_every_emitted_case() {
        let mut config = RunConfig::new(ConfigName::SymStream);
        config.defects = DefectSet { d1: true, d2: true, ..DefectSet::NONE };
        let report = run(&config).expect("valid config");
        for case in &report.all_cases {
            let outcome =
                replay(case, &ReplayContext::default()).expect("replay runs");
            assert!(
                matches!(outcome, ReplayOutcome::Reproduced(_)),
                "case for {} replayed differently",
                case.scenario
            );
        }
    }

    #[test]
    fn replay_detects_the_defect_gate() {
        let mut config = RunConfig::new(ConfigName::SymStream);
        config.defects = DefectSet { d1: true, d2: true, ..DefectSet::NONE };
        let report = run(&config).expect("valid config");
        assert!(!report.errors.is_empty());
        for (sig, case) in &report.errors {
            let mut ungated = case.clone();
            ungated.defects.clear();
            match replay(&ungated, &ReplayContext::default()) {
                Ok(ReplayOutcome::OutcomeChanged { replayed, .. }) => {
                    assert!(replayed.status.is_ok(), "{sig}: ungated replay should pass");
                }
                // A healthy endpoint exchanges a different packet
                // sequence, so the recorded verdict trail can stop
                // fitting altogether.
                Err(ReplayFailure::Diverged(_)) => {}
                other => panic!("{sig}: defect gate not detected: {other:?}"),
            }
        }
    }

    #[test]
    fn test_cases_survive_json_round_trips() {
        let report = run(&RunConfig::new(ConfigName::SymStream)).expect("valid config");
        let case = &report.all_cases[0];
        let parsed = TestCase::from_json(&case.to_json()).expect("round trip");
        assert_eq!(&parsed, case);
    }
}

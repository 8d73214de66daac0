//! Command-line driver: explore a configuration, replay a recorded
//! case, or print the branching walkthrough.
//!
//! Exit codes: 0 means the action completed without finding errors,
//! 1 means it completed and found (or reproduced) errors, 2 means the
//! invocation itself was unusable or a replay failed to reproduce its
//! recording.

use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use thiserror::Error;

use crate::explore::{run_branch_demo, Limits, PathStatus, Strategy, TestCase, TestCaseError};
use crate::miniquic::{DefectSet, ImplKind, Scenario};
use crate::report::write_report;
use crate::run::{
    replay, run, ConfigError, ConfigName, ReplayContext, ReplayFailure, ReplayOutcome, RunConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "symquic",
    version,
    about = "Interoperability testing for MiniQUIC via single-byte symbolic execution"
)]
pub struct Args {
    /// Configuration to explore: sym-stream, sym-version, sym-drop,
    /// or sym-mod-K with K one of 1, 5, 10.
    #[arg(long, value_name = "NAME", conflicts_with_all = ["replay", "demo"])]
    pub config: Option<String>,

    /// Replay a recorded test case file and check that it reproduces.
    #[arg(long, value_name = "FILE", conflicts_with = "demo")]
    pub replay: Option<PathBuf>,

    /// Run the two-branch walkthrough program and print its paths.
    #[arg(long)]
    pub demo: bool,

    /// Defects to arm, comma separated (for example d1,d2).
    #[arg(long, value_name = "TAGS", default_value = "")]
    pub defects: String,

    /// Client implementation: pull or evloop.
    #[arg(long, value_name = "IMPL", default_value = "pull")]
    pub client_impl: String,

    /// Server implementation: pull or evloop.
    #[arg(long, value_name = "IMPL", default_value = "evloop")]
    pub server_impl: String,

    /// Scenario override for fixed-scenario configurations: s1, s2, s3.
    #[arg(long, value_name = "ID")]
    pub scenario: Option<String>,

    /// Exploration strategy: dfs, bfs, or random.
    #[arg(long, value_name = "NAME", default_value = "dfs")]
    pub strategy: String,

    /// Seed for the random strategy.
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,

    /// Stop after this many terminated paths.
    #[arg(long, value_name = "N", default_value_t = 100_000)]
    pub max_paths: usize,

    /// Cut off any single path after this many steps.
    #[arg(long, value_name = "N", default_value_t = 100_000)]
    pub max_steps: u64,

    /// Drop budget for sym-drop runs (also required when replaying
    /// a sym-drop case).
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub max_drops: u32,

    /// Wall-clock limit for the whole exploration, in seconds.
    #[arg(long, value_name = "SECS")]
    pub time_limit: Option<f64>,

    /// Output directory for report.txt, stats.json, and error cases.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Also persist every explored path under cases/.
    #[arg(long)]
    pub emit_cases: bool,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    BadFlag(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read {path}: {source}")]
    CaseRead { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Case(#[from] TestCaseError),
    #[error("cannot write outputs: {0}")]
    Output(#[from] std::io::Error),
}

/// Run the parsed invocation and return the process exit code.
pub fn run_cli(args: Args) -> i32 {
    match dispatch(args) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            2
        }
    }
}

fn dispatch(args: Args) -> Result<i32, CliError> {
    if args.demo {
        return Ok(print_demo());
    }
    if let Some(path) = &args.replay {
        return replay_file(path, &args);
    }
    if args.config.is_some() {
        return explore_config(&args);
    }
    Err(CliError::BadFlag(
        "nothing to do; pass one of --config, --replay, or --demo".to_string(),
    ))
}

fn print_demo() -> i32 {
    for (i, path) in run_branch_demo().iter().enumerate() {
        println!(
            "path {}: {{{}}} witness={}",
            i + 1,
            path.constraints.join(", "),
            path.witness
        );
    }
    0
}

fn parse_impl(text: &str, side: &str) -> Result<ImplKind, CliError> {
    ImplKind::parse(text).ok_or_else(|| {
        CliError::BadFlag(format!("unknown {side} implementation {text:?}; expected pull or evloop"))
    })
}

fn parse_strategy(args: &Args) -> Result<Strategy, CliError> {
    match args.strategy.as_str() {
        "dfs" => Ok(Strategy::Dfs),
        "bfs" => Ok(Strategy::Bfs),
        "random" => Ok(Strategy::RandomSeeded(args.seed)),
        other => Err(CliError::BadFlag(format!(
            "unknown strategy {other:?}; expected dfs, bfs, or random"
        ))),
    }
}

fn parse_limits(args: &Args) -> Limits {
    Limits {
        max_paths: args.max_paths,
        max_steps_per_path: args.max_steps,
        time_limit: args.time_limit.map(Duration::from_secs_f64),
    }
}

fn explore_config(args: &Args) -> Result<i32, CliError> {
    let name: ConfigName = args.config.as_deref().expect("checked by dispatch").parse()?;
    let mut config = RunConfig::new(name);
    config.client_impl = parse_impl(&args.client_impl, "client")?;
    config.server_impl = parse_impl(&args.server_impl, "server")?;
    config.defects = DefectSet::parse(&args.defects).map_err(ConfigError::from)?;
    config.strategy = parse_strategy(args)?;
    config.limits = parse_limits(args);
    config.max_drops = args.max_drops;
    if let Some(text) = &args.scenario {
        let scenario = Scenario::parse(text)
            .ok_or_else(|| ConfigError::UnknownScenario(text.clone()))?;
        config.scenario = Some(scenario);
    }

    let report = run(&config)?;
    let label = name.to_string();
    write_report(&args.out, &label, &report, args.emit_cases)?;
    print!("{}", crate::report::render_table(&[(label.as_str(), &report.stats)]));
    for (sig, _) in &report.errors {
        println!("error: {sig}");
    }
    Ok(if report.errors.is_empty() { 0 } else { 1 })
}

fn replay_file(path: &PathBuf, args: &Args) -> Result<i32, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| CliError::CaseRead { path: path.clone(), source })?;
    let case = TestCase::from_json(&text)?;
    let context = ReplayContext {
        client_impl: parse_impl(&args.client_impl, "client")?,
        server_impl: parse_impl(&args.server_impl, "server")?,
        max_drops: args.max_drops,
        limits: parse_limits(args),
    };
    match replay(&case, &context) {
        Ok(ReplayOutcome::Reproduced(result)) => match result.status {
            PathStatus::FinishedOk => {
                println!("reproduced: ok");
                Ok(0)
            }
            PathStatus::FinishedError { fault } => {
                println!("reproduced: {fault}");
                Ok(1)
            }
            PathStatus::LimitExceeded => {
                println!("reproduced: limit exceeded");
                Ok(1)
            }
        },
        Ok(ReplayOutcome::OutcomeChanged { recorded, replayed }) => {
            eprintln!(
                "replay finished but its outcome changed: recorded {recorded:?}, got {:?}",
                replayed.status
            );
            Ok(2)
        }
        Err(ReplayFailure::Diverged(err)) => {
            eprintln!("replay diverged: {err}");
            Ok(2)
        }
        Err(ReplayFailure::Config(err)) => Err(err.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(line: &[&str]) -> Args {
        Args::try_parse_from(std::iter::once("symquic").chain(line.iter().copied()))
            .expect("flags parse")
    }

    #[test]
    fn missing_action_is_a_usage_error() {
        assert_eq!(run_cli(args(&[])), 2);
    }

    #[test]
    fn conflicting_actions_are_rejected_by_the_parser() {
        let conflict = Args::try_parse_from(["symquic", "--config", "sym-stream", "--demo"]);
        assert!(conflict.is_err());
    }

    #[test]
    fn unknown_names_exit_with_usage_errors() {
        assert_eq!(run_cli(args(&["--config", "sym-flood"])), 2);
        assert_eq!(run_cli(args(&["--config", "sym-stream", "--strategy", "dls"])), 2);
        assert_eq!(run_cli(args(&["--config", "sym-stream", "--client-impl", "poll"])), 2);
        assert_eq!(run_cli(args(&["--config", "sym-drop", "--scenario", "s9"])), 2);
    }
}

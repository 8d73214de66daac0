//! Drive the installed binary the way an operator would: run
//! configurations, inspect the output directory, replay saved cases,
//! and confirm the exit codes scripts depend on.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn symquic(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symquic"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).expect("utf8 stdout")
}

fn stderr(output: &Output) -> String {
    String::from_utf8(output.stderr.clone()).expect("utf8 stderr")
}

#[test]
fn a_clean_run_exits_zero_and_writes_the_report_layout() {
    let dir = TempDir::new().expect("tempdir");
    let output = symquic(
        &["--config", "sym-stream", "--out", "out", "--emit-cases"],
        dir.path(),
    );
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));

    let out = dir.path().join("out");
    let report = std::fs::read_to_string(out.join("report.txt")).expect("report.txt");
    assert!(report.contains("Config"), "missing header: {report}");
    assert!(report.contains("sym-stream"), "missing label: {report}");

    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("stats.json")).expect("stats"))
            .expect("stats.json parses");
    assert_eq!(stats["paths_total"], 3);
    assert_eq!(stats["unique_errors"], 0);

    assert!(!out.join("errors").join("e1.json").exists());
    for case in 1..=3 {
        assert!(out.join("cases").join(format!("c{case}.json")).exists());
    }
    assert!(!out.join("cases").join("c4.json").exists());
}

#[test]
fn a_faulting_run_exits_one_and_names_each_unique_error() {
    let dir = TempDir::new().expect("tempdir");
    let output = symquic(
        &["--config", "sym-stream", "--defects", "d1,d2", "--out", "out"],
        dir.path(),
    );
    assert_eq!(output.status.code(), Some(1), "{}", stderr(&output));

    let text = stdout(&output);
    assert!(text.contains("interop_divergence"), "stdout: {text}");
    assert!(text.contains("lifecycle_fault"), "stdout: {text}");

    let out = dir.path().join("out");
    assert!(out.join("errors").join("e1.json").exists());
    assert!(out.join("errors").join("e2.json").exists());
    assert!(!out.join("errors").join("e3.json").exists());
    assert!(!out.join("cases").exists(), "cases written without --emit-cases");
}

#[test]
fn replaying_saved_cases_reports_the_recorded_outcome() {
    let dir = TempDir::new().expect("tempdir");
    let seeded = symquic(
        &["--config", "sym-stream", "--defects", "d1,d2", "--out", "seeded"],
        dir.path(),
    );
    assert_eq!(seeded.status.code(), Some(1));

    let error_case = dir.path().join("seeded").join("errors").join("e1.json");
    let replayed = symquic(&["--replay", error_case.to_str().expect("utf8")], dir.path());
    assert_eq!(replayed.status.code(), Some(1), "{}", stderr(&replayed));
    assert!(stdout(&replayed).starts_with("reproduced:"), "{}", stdout(&replayed));

    let clean = symquic(
        &["--config", "sym-stream", "--out", "clean", "--emit-cases"],
        dir.path(),
    );
    assert_eq!(clean.status.code(), Some(0));

    let ok_case = dir.path().join("clean").join("cases").join("c1.json");
    let replayed = symquic(&["--replay", ok_case.to_str().expect("utf8")], dir.path());
    assert_eq!(replayed.status.code(), Some(0), "{}", stderr(&replayed));
    assert_eq!(stdout(&replayed), "reproduced: ok\n");
}

#[test]
fn usage_problems_exit_two() {
    let dir = TempDir::new().expect("tempdir");

    let unknown = symquic(&["--config", "sym-telepathy"], dir.path());
    assert_eq!(unknown.status.code(), Some(2));
    assert!(stderr(&unknown).contains("sym-telepathy"));

    let missing = symquic(&["--replay", "no-such-case.json"], dir.path());
    assert_eq!(missing.status.code(), Some(2));

    let nothing = symquic(&[], dir.path());
    assert_eq!(nothing.status.code(), Some(2));

    let forced = symquic(&["--config", "sym-stream", "--scenario", "s2"], dir.path());
    assert_eq!(forced.status.code(), Some(2));
    assert!(stderr(&forced).contains("scenario"), "{}", stderr(&forced));
}

#[test]
fn identical_runs_write_byte_identical_error_files() {
    let dir = TempDir::new().expect("tempdir");
    for out in ["first", "second"] {
        let output = symquic(
            &["--config", "sym-version", "--defects", "d3", "--out", out],
            dir.path(),
        );
        assert_eq!(output.status.code(), Some(1), "{}", stderr(&output));
    }
    let read = |out: &str| {
        std::fs::read(dir.path().join(out).join("errors").join("e1.json")).expect("error file")
    };
    assert_eq!(read("first"), read("second"));
}

//! Rendering and persistence of run results: the fixed-width summary
//! table, machine-readable stats, and recorded test cases.
//!
//! Everything written here is deterministic except the timing columns
//! of the table and the timing fields of `stats.json`. The error
//! files under `errors/` contain no timing data at all, so two runs
//! with identical flags produce byte-identical error files.

use std::fs;
use std::io;
use std::path::Path;

use crate::run::{RunReport, RunStats};

/// Column headers of the summary table, in order.
pub const COLUMNS: [&str; 8] = [
    "Config",
    "Steps/s",
    "Time[s]",
    "PCov[%]",
    "BCov[%]",
    "TDomain[%]",
    "MaxStates",
    "Unique errors",
];

/// Render a fixed-width summary table, one row per labeled run.
pub fn render_table(rows: &[(&str, &RunStats)]) -> String {
    let mut cells: Vec<[String; 8]> = vec![COLUMNS.map(str::to_string)];
    for (label, stats) in rows {
        cells.push([
            label.to_string(),
            format!("{:.1}", stats.steps_per_second),
            format!("{:.3}", stats.wall_time_s),
            format!("{:.1}", stats.probe_coverage_pct),
            format!("{:.1}", stats.branch_coverage_pct),
            format!("{:.1}", stats.domain_time_pct),
            stats.max_live_states.to_string(),
            stats.unique_errors.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..8)
        .map(|col| cells.iter().map(|row| row[col].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        for (col, cell) in row.iter().enumerate() {
            if col > 0 {
                out.push_str("  ");
            }
            if col == 0 {
                out.push_str(&format!("{:<width$}", cell, width = widths[col]));
            } else {
                out.push_str(&format!("{:>width$}", cell, width = widths[col]));
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    }
    out
}

/// Serialize stats as pretty JSON with a trailing newline.
pub fn stats_json(stats: &RunStats) -> String {
    let mut s = serde_json::to_string_pretty(stats).expect("stats always serialize");
    s.push('\n');
    s
}

/// Write one run's outputs under `dir`:
///
/// - `report.txt`: the one-row summary table;
/// - `stats.json`: the same numbers, machine readable;
/// - `errors/e1.json`, `errors/e2.json`, ...: one test case per
///   unique fault signature, in signature order;
/// - `cases/c1.json`, ...: every explored path, only when
///   `emit_cases` is set.
pub fn write_report(
    dir: &Path,
    label: &str,
    report: &RunReport,
    emit_cases: bool,
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.txt"), render_table(&[(label, &report.stats)]))?;
    fs::write(dir.join("stats.json"), stats_json(&report.stats))?;

    let errors_dir = dir.join("errors");
    fs::create_dir_all(&errors_dir)?;
    for (i, (_, case)) in report.errors.iter().enumerate() {
        fs::write(errors_dir.join(format!("e{}.json", i + 1)), case.to_json())?;
    }

    if emit_cases {
        let cases_dir = dir.join("cases");
        fs::create_dir_all(&cases_dir)?;
        for (i, case) in report.all_cases.iter().enumerate() {
            fs::write(cases_dir.join(format!("c{}.json", i + 1)), case.to_json())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explore::TestCase;
    use crate::miniquic::DefectSet;
    use crate::run::{run, ConfigName, RunConfig};

    fn faulty_sym_stream() -> RunConfig {
        let mut config = RunConfig::new(ConfigName::SymStream);
        config.defects = DefectSet { d1: true, d2: true, ..DefectSet::NONE };
        config
    }

    #[test]
    fn table_lines_up_headers_and_values() {
        let report = run(&RunConfig::new(ConfigName::SymStream)).expect("valid config");
        let table = render_table(&[("sym-stream", &report.stats)]);
        let mut lines = table.lines();
        let header = lines.next().expect("header line");
        let row = lines.next().expect("value row");
        assert!(header.contains("Steps/s") && header.contains("Unique errors"));
        assert!(row.starts_with("sym-stream"));
        assert!(row.trim_end().ends_with('0'), "{row:?}");
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn outputs_land_in_the_expected_layout() {
        let report = run(&faulty_sym_stream()).expect("valid config");
        let dir = tempfile::tempdir().expect("tempdir");
        write_report(dir.path(), "sym-stream", &report, true).expect("write");

        assert!(dir.path().join("report.txt").is_file());
        let stats: crate::run::RunStats = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("stats.json")).expect("stats"),
        )
        .expect("stats parse");
        assert_eq!(stats.unique_errors, 2);

        let e1 = std::fs::read_to_string(dir.path().join("errors/e1.json")).expect("e1");
        let case = TestCase::from_json(&e1).expect("case parses");
        assert!(case.outcome.is_error());
        assert!(dir.path().join("errors/e2.json").is_file());
        assert!(!dir.path().join("errors/e3.json").exists());

        let case_count = std::fs::read_dir(dir.path().join("cases")).expect("cases").count();
        assert_eq!(case_count, report.all_cases.len());
    }

    #[test]
    fn error_files_are_reproducible_byte_for_byte() {
        let first = run(&faulty_sym_stream()).expect("valid config");
        let second = run(&faulty_sym_stream()).expect("valid config");
        let a = tempfile::tempdir().expect("tempdir");
        let b = tempfile::tempdir().expect("tempdir");
        write_report(a.path(), "sym-stream", &first, false).expect("write");
        write_report(b.path(), "sym-stream", &second, false).expect("write");
        for name in ["errors/e1.json", "errors/e2.json"] {
            let left = std::fs::read(a.path().join(name)).expect("left");
            let right = std::fs::read(b.path().join(name)).expect("right");
            assert_eq!(left, right, "{name} differs between identical runs");
        }
    }
}

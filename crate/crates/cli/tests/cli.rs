// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

fn accelsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accelsim")).args(args).output().unwrap()
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn validate_prints_a_summary() {
    let cfg = configs().join("izigzag.toml");
    let o = accelsim(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!o.stdout.is_empty());
}

#[test]
fn validate_rejects_a_fragment() {
    let cfg = configs().join("common.toml");
    assert_eq!(accelsim(&["validate", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn run_writes_csv_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let trace = dir.path().join("t/trace.txt");
    let o = accelsim(&[
        "run",
        "chain",
        "--out-dir",
        out.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("trace_sha256"), "{stdout}");
    for f in ["metrics.csv", "tasks.csv"] {
        let text = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(text.lines().count() >= 2, "{f}");
    }
    assert!(std::fs::metadata(&trace).unwrap().len() > 0);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = accelsim(&["sweep", "chain", "--axis", "num_tb", "--values", "2,1", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert!(rows[0].starts_with("axis,value,"));
    assert!(rows[1].starts_with("num_tb,2,") && rows[2].starts_with("num_tb,1,"), "{text}");
}

#[test]
fn unknown_names_exit_with_two() {
    assert_eq!(accelsim(&["suite", "nonsense"]).status.code(), Some(2));
    assert_eq!(accelsim(&["run", "no-such-scenario"]).status.code(), Some(2));
    assert_eq!(accelsim(&["sweep", "chain", "--axis", "bogus", "--values", "1"]).status.code(), Some(2));
}

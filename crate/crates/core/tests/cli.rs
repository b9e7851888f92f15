//! The `harmet` binary: exit codes and the files each subcommand writes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use harmonic_core::continuity::TRACE_COLUMNS;
use harmonic_core::problem::{FieldFile, Problem};
use serde_json::Value;

fn harmet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harmet")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn gen_file(dir: &Path, family: &str, rank: &str, grid: &str, seed: &str) -> String {
    let path = dir.join(format!("{family}.json"));
    let out = harmet(&["gen", "--family", family, "--rank", rank, "--grid", grid, "--seed", seed, "--out", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path.to_str().unwrap().to_string()
}

#[test]
fn solve_harmonic_writes_trace_report_and_metric() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = harmet(&["solve", "--problem", "unitary_s1", "--out", d, "--plot"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(TRACE_COLUMNS));
    let rep = json(&dir.path().join("solve_report.json"));
    assert_eq!(rep["format"], "harmet-solve-report");
    assert_eq!(rep["version"], 1);
    assert_eq!(rep["outcome"], "harmonic");
    assert!(rep["final_residual"].as_f64().unwrap() < 1e-8);
    assert_eq!(rep["stages"].as_u64().unwrap() as usize, csv.lines().count() - 1);
    let (grid, name, values) = FieldFile::from_json_str(&fs::read_to_string(dir.path().join("metric.json")).unwrap()).unwrap();
    assert_eq!((grid.npoints(), name.as_str(), values[0].nrows()), (64, "metric", 2));
    assert!(fs::read_to_string(dir.path().join("plot_trace.py")).unwrap().contains("trace.csv"));
}

#[test]
fn solve_blow_up_exits_two_with_the_direction() {
    let dir = tempfile::tempdir().unwrap();
    let out = harmet(&["solve", "--problem", "jordan_s1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let rep = json(&dir.path().join("solve_report.json"));
    assert_eq!(rep["outcome"], "blow_up");
    assert!(rep["final_residual"].is_null());
    let (_, name, _) = FieldFile::from_json_str(&fs::read_to_string(dir.path().join("u_infty.json")).unwrap()).unwrap();
    assert_eq!(name, "u_infty");
    assert!(!dir.path().join("metric.json").exists());
}

#[test]
fn detect_writes_certificates_and_projections() {
    let dir = tempfile::tempdir().unwrap();
    let out = harmet(&["detect", "--problem", "jordan_s1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rep = json(&dir.path().join("detect_report.json"));
    assert_eq!(rep["format"], "harmet-detect-report");
    assert_eq!(rep["verdict"], "invariant_sub_bundle");
    assert_eq!(rep["certificates"][0]["certified"], true);
    let (_, name, values) = FieldFile::from_json_str(&fs::read_to_string(dir.path().join("projection_0.json")).unwrap()).unwrap();
    assert_eq!((name.as_str(), values.len()), ("projection_rank1", 128));
}

#[test]
fn split_gauge_fix_and_oracle_on_generated_problems() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let block = gen_file(dir.path(), "block_diag", "2", "32", "5");
    assert_eq!(code(&harmet(&["split", "--problem", &block, "--out", d])), 0);
    let rep = json(&dir.path().join("split_report.json"));
    assert_eq!(rep["format"], "harmet-split-report");
    assert_eq!(rep["split"]["passed"], true);

    let simple = gen_file(dir.path(), "random_simple", "2", "8x8", "2");
    assert_eq!(code(&harmet(&["gauge-fix", "--problem", &simple, "--out", d])), 0);
    let rep = json(&dir.path().join("gauge_fix_report.json"));
    assert!(rep["residual_l2"].as_f64().unwrap() < 1e-6);
    Problem::load(&dir.path().join("gauge_fixed.json")).unwrap();

    assert_eq!(code(&harmet(&["oracle", "--problem", "unitary_s1", "--out", d])), 0);
    let rep = json(&dir.path().join("oracle_report.json"));
    assert_eq!(rep["format"], "harmet-oracle-report");
    assert_eq!(rep["agree"], true);
    assert_eq!(rep["monodromy"].as_array().unwrap().len(), 2);
}

#[test]
fn gen_prints_a_reproducible_problem() {
    let a = harmet(&["gen", "--family", "jordan", "--rank", "3", "--grid", "16", "--seed", "4"]);
    let b = harmet(&["gen", "--family", "jordan", "--rank", "3", "--grid", "16", "--seed", "4"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let p = Problem::from_json_str(&String::from_utf8(a.stdout).unwrap()).unwrap();
    assert_eq!(p.rank(), 3);
}

#[test]
fn errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&harmet(&["solve", "--problem", "no_such_problem", "--out", d])), 1);
    assert_eq!(code(&harmet(&["gen", "--family", "nope", "--rank", "2", "--grid", "8"])), 1);
    assert_eq!(code(&harmet(&["gen", "--family", "jordan", "--rank", "2", "--grid", "8x"])), 1);
    assert_eq!(code(&harmet(&["solve", "--problem", "unitary_s1", "--eps-min", "-1", "--out", d])), 1);
    assert_eq!(code(&harmet(&["oracle", "--problem", "blockdiag_t2", "--out", d])), 1);
    assert_eq!(code(&harmet(&["solve"])), 1);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"format\": \"harmet-problem\",").unwrap();
    let out = harmet(&["solve", "--problem", bad.to_str().unwrap(), "--out", d]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
    assert_eq!(code(&harmet(&["--help"])), 0);
}

//! End-to-end runs of the `synthgap` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "\
n = 12
g = 60
K = 4
test_samples = 200
mc_samples = 300
seed = 1
train.epochs = 2
";

fn synthgap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthgap"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn minimal_run_writes_one_report_and_one_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n = 12\ng = 60\ntest_samples = 200\nmc_samples = 300\ntrain.epochs = 2\n");
    let o = synthgap(dir.path(), &["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["model_0.sbm", "report.json", "trace_0.csv"]);
    let report = json(&out.join("report.json"));
    let rows = report.as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["seed"], 0);
    assert_eq!(rows[0]["n"], 12);
    assert_eq!(rows[0]["fingerprint"].as_str().unwrap().len(), 64);
    assert!(rows[0]["wall_time_s"].is_null());
    let trace = fs::read_to_string(out.join("trace_0.csv")).unwrap();
    assert!(trace.starts_with("step,disc,rob,loss_real,loss_synth,test_acc\n"));
    assert_eq!(trace.lines().count(), 1 + 2 * 2);
}

#[test]
fn missing_n_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "g = 60\n");
    let o = synthgap(dir.path(), &["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`n`"), "{}", stderr(&o));
}

#[test]
fn malformed_toml_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n = 12\ng = = 60\n");
    let o = synthgap(dir.path(), &["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn seed_flag_beats_the_file_and_key_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = synthgap(
        dir.path(),
        &["run", "--config", &cfg, "--seed", "5", "--train.epochs", "1", "--format", "csv"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(lines.next(), None);
    let seed_col = header.iter().position(|h| *h == "seed").unwrap();
    assert_eq!(row[seed_col], "5");
    assert_eq!(header.len(), row.len());
    let trace = fs::read_to_string(out.join("trace_5.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2);
}

#[test]
fn unknown_keys_and_axes_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\n[sweep]\naxis = \"epochs\"\nvalues = [1, 2]\n"));
    assert_eq!(synthgap(dir.path(), &["sweep", "--config", &cfg]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "n = 12\ng = 60\nepochs = 3\n");
    assert_eq!(synthgap(dir.path(), &["run", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(synthgap(dir.path(), &["run", "--bogus", "1"]).status.code(), Some(2));
}

#[test]
fn empty_sweep_grids_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for grid in ["start = 50\nstop = 50\nstep = 10", "start = 50\nstop = 60\nstep = 20"] {
        let cfg = write_config(dir.path(), &format!("{SMALL}\n[sweep]\naxis = \"g\"\n{grid}\n"));
        let o = synthgap(dir.path(), &["sweep", "--config", &cfg]);
        assert_eq!(o.status.code(), Some(2), "{grid}");
        assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
    }
}

#[test]
fn cluster_sweep_gives_one_row_per_point_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}trials = 2\n\n[sweep]\naxis = \"K\"\nvalues = [1, 3, 6, 12]\n"),
    );
    let o = synthgap(dir.path(), &["sweep", "--config", &cfg, "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let rows = json(&out.join("report.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4 * 2);
    let keys: Vec<(u64, u64, u64)> = rows
        .iter()
        .map(|r| (r["point"].as_u64().unwrap(), r["seed"].as_u64().unwrap(), r["k"].as_u64().unwrap()))
        .collect();
    assert_eq!(
        keys,
        [(0, 1, 1), (0, 2, 1), (1, 1, 3), (1, 2, 3), (2, 1, 6), (2, 2, 6), (3, 1, 12), (3, 2, 12)]
    );
    let fps: std::collections::BTreeSet<&str> = rows.iter().map(|r| r["fingerprint"].as_str().unwrap()).collect();
    assert_eq!(fps.len(), 4);
    let summary = json(&out.join("summary.json"));
    let summary = summary.as_array().unwrap();
    assert_eq!(summary.len(), 4);
    assert!(summary[0]["acc_delta_prev"].is_null());
    assert!(summary[1]["acc_delta_prev"].is_f64());
    assert!(out.join("trace_p3_2.csv").exists());
}

#[test]
fn synthetic_count_sweep_from_a_range() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\n[sweep]\naxis = \"g\"\nstart = 25\nstop = 100\nstep = 25\n"));
    let o = synthgap(dir.path(), &["sweep", "--config", &cfg, "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 4);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().next().unwrap().ends_with("acc_delta_prev"));
    assert_eq!(summary.lines().count(), 1 + 4);
}

#[test]
fn verify_bound_single_trial_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}trials = 1\n"));
    let o = synthgap(dir.path(), &["verify-bound", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("violations 0"), "{stdout}");
    let path = dir.path().join("out").join("verification.json");
    let first = fs::read_to_string(&path).unwrap();
    let report: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 1);
    assert_eq!(report["trials"], 1);

    let cfg = write_config(dir.path(), &format!("{SMALL}trials = 4\n"));
    assert_eq!(synthgap(dir.path(), &["verify-bound", "--config", &cfg, "--jobs", "3"]).status.code(), Some(0));
    let a = fs::read_to_string(&path).unwrap();
    assert_eq!(synthgap(dir.path(), &["verify-bound", "--config", &cfg, "--jobs", "1"]).status.code(), Some(0));
    let b = fs::read_to_string(&path).unwrap();
    assert_eq!(a, b);
    let report: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 4);
}

#[test]
fn verify_bound_reads_the_bound_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}trials = 2\nbound = \"single_lower\"\n"));
    let o = synthgap(dir.path(), &["verify-bound", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = json(&dir.path().join("out").join("verification.json"));
    assert_eq!(report["kind"], "SingleLower");
}

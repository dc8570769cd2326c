use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[simulation]
num_users = 4
num_rounds = 16
gradient_dim = 8
participation_rate = 0.3
seed = 0

[analytics]
granularity = 4
"#;

fn disagg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disagg")).args(args).output().expect("binary runs")
}

fn manifest(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &TempDir, body: &str) -> PathBuf {
    let m = manifest(dir.path(), body);
    let run = dir.path().join("run");
    let out = disagg(&["simulate", "--manifest", s(&m), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    run
}

fn metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn simulate_writes_five_files() {
    let tmp = TempDir::new().unwrap();
    let run = simulate(&tmp, SMALL);
    let mut names: Vec<String> = fs::read_dir(&run).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["G_agg.dmat", "G_true_avg.dmat", "P_true.bmat", "constraints.txt", "manifest.toml"]);
    assert!(fs::read_to_string(run.join("P_true.bmat")).unwrap().starts_with("BMAT 16 4\n"));
    assert!(fs::read(run.join("G_agg.dmat")).unwrap().starts_with(b"DMAT 16 8 f64\n"));
}

#[test]
fn rerunning_a_manifest_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let run = simulate(&tmp, SMALL);
    let again = tmp.path().join("again");
    let out = disagg(&["simulate", "--manifest", s(&tmp.path().join("experiment.toml")), "--out", s(&again)]);
    assert!(out.status.success());
    for f in ["G_agg.dmat", "G_true_avg.dmat", "P_true.bmat", "constraints.txt", "manifest.toml"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    // The copied manifest reproduces the run on its own.
    let third = tmp.path().join("third");
    assert!(disagg(&["simulate", "--manifest", s(&run.join("manifest.toml")), "--out", s(&third)]).status.success());
    assert_eq!(fs::read(run.join("G_agg.dmat")).unwrap(), fs::read(third.join("G_agg.dmat")).unwrap());
}

#[test]
fn batch_larger_than_dataset_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let body = format!(
        "{SMALL}\n[fedavg]\nbatch_size = 32\ndataset_size = 16\n"
    )
    .replace("seed = 0", "seed = 0\nupdate_model = { kind = \"fedavg\" }");
    let m = manifest(tmp.path(), &body);
    let out = disagg(&["simulate", "--manifest", s(&m), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds dataset"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn attack_recovers_the_cyclic_fixture() {
    let tmp = TempDir::new().unwrap();
    let body = SMALL.replace("num_rounds = 16", "num_rounds = 8\nselection = \"cyclic\"").replace("granularity = 4", "granularity = 1");
    let run = simulate(&tmp, &body);
    let out = disagg(&["attack", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = metrics(&run);
    assert_eq!(m["column_accuracy"], 1.0);
    assert_eq!(m["matrix_exact"], true);
    assert!(m["grad_rel_error"].as_f64().unwrap() <= 1e-10);
    assert_eq!(m["manifest_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn per_column_csv_has_the_documented_columns() {
    let tmp = TempDir::new().unwrap();
    let run = simulate(&tmp, SMALL);
    assert!(disagg(&["attack", s(&run)]).status.success());
    let csv = fs::read_to_string(run.join("columns.csv")).unwrap();
    let golden = include_str!("golden/columns_header.csv");
    assert_eq!(csv.lines().next().unwrap(), golden.trim_end());
    assert_eq!(csv.lines().count(), 5);
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[5].len(), 16, "bitstring covers every round");
    }
}

#[test]
fn zero_time_limit_times_out_every_column() {
    let tmp = TempDir::new().unwrap();
    let run = simulate(&tmp, SMALL);
    let out = disagg(&["attack", s(&run), "--time-limit-ms", "0"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let m = metrics(&run);
    assert_eq!(m["column_accuracy"], 0.0);
    assert_eq!(m["status_counts"]["timeout-incumbent"], 4);
}

#[test]
fn too_few_rounds_exit_with_a_structural_failure() {
    let tmp = TempDir::new().unwrap();
    let body = SMALL.replace("num_users = 4", "num_users = 12").replace("num_rounds = 16", "num_rounds = 6");
    let run = simulate(&tmp, &body);
    let out = disagg(&["attack", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("less than the number of users"));
    assert!(metrics(&run)["structural_failure"].is_string());
}

#[test]
fn evaluate_reproduces_the_attack_metrics() {
    let tmp = TempDir::new().unwrap();
    let run = simulate(&tmp, SMALL);
    let res = tmp.path().join("result");
    assert!(disagg(&["attack", s(&run), "--out", s(&res)]).status.success());
    let first = metrics(&res);
    fs::remove_file(res.join("metrics.json")).unwrap();
    let out = disagg(&["evaluate", s(&run), "--result", s(&res)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let second = metrics(&res);
    for key in ["column_accuracy", "correct_columns", "matrix_exact", "grad_rel_error", "status_counts", "manifest_hash"] {
        assert_eq!(first[key], second[key], "{key}");
    }
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = TempDir::new().unwrap();
    let out = disagg(&["attack", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

const SWEEP: &str = r#"
trials = 2

[simulation]
num_users = 8
num_rounds = 32
gradient_dim = 16

[analytics]
granularity = 8

[sweep]
rounds = [32, 64]
users = [8, 16]
"#;

#[test]
fn sweep_writes_one_row_per_point_and_trial() {
    let tmp = TempDir::new().unwrap();
    let m = manifest(tmp.path(), SWEEP);
    let out_dir = tmp.path().join("sweep");
    let out = disagg(&["sweep", "--manifest", s(&m), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(out_dir.join("sweep.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_owned).collect();
    let golden: Vec<&str> = include_str!("golden/sweep_header.csv").trim_end().split(',').collect();
    assert_eq!(header, golden);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert_eq!(r[3].len(), 64, "manifest hash");
        let point = fs::read_to_string(out_dir.join("points").join(format!("point-{:03}.toml", r[0].parse::<usize>().unwrap()))).unwrap();
        assert!(point.contains("[simulation]"));
    }
    assert!(out_dir.join("summary.csv").exists());
    assert!(fs::read_to_string(out_dir.join("min_rounds.csv")).unwrap().lines().count() == 3);
}

#[test]
fn sweep_rows_can_be_rederived_from_their_provenance() {
    let tmp = TempDir::new().unwrap();
    let m = manifest(tmp.path(), &SWEEP.replace("users = [8, 16]", "").replace("trials = 2", "trials = 1"));
    let out_dir = tmp.path().join("sweep");
    assert!(disagg(&["sweep", "--manifest", s(&m), "--out", s(&out_dir)]).status.success());
    let mut rdr = csv::Reader::from_path(out_dir.join("sweep.csv")).unwrap();
    let row = rdr.records().next().unwrap().unwrap();
    let point = out_dir.join("points/point-000.toml");
    let run = tmp.path().join("rerun");
    let seed = &row[2];
    assert!(disagg(&["simulate", "--manifest", s(&point), "--seed", seed, "--out", s(&run)]).status.success());
    assert!(disagg(&["attack", s(&run)]).status.success());
    let rerun = metrics(&run);
    assert_eq!(rerun["manifest_hash"].as_str().unwrap(), &row[3]);
    assert_eq!(format!("{:.6}", rerun["column_accuracy"].as_f64().unwrap()), &row[11]);
}

#[test]
fn oversized_sweeps_are_refused() {
    let tmp = TempDir::new().unwrap();
    let body = SWEEP.replace("trials = 2", "trials = 200\nsweep_cap = 512");
    let m = manifest(tmp.path(), &body);
    let out = disagg(&["sweep", "--manifest", s(&m), "--out", s(&tmp.path().join("sweep"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("800 runs"));
}

#[test]
fn coarser_windows_do_not_help() {
    let tmp = TempDir::new().unwrap();
    let body = r#"
trials = 3

[simulation]
num_users = 16
num_rounds = 40
gradient_dim = 32

[sweep]
granularity = [5, 10, 20]
"#;
    let m = manifest(tmp.path(), body);
    let out_dir = tmp.path().join("sweep");
    assert!(disagg(&["sweep", "--manifest", s(&m), "--out", s(&out_dir)]).status.success());
    let mut rdr = csv::Reader::from_path(out_dir.join("summary.csv")).unwrap();
    let acc: Vec<f64> = rdr.records().map(|r| r.unwrap()[3].parse().unwrap()).collect();
    assert_eq!(acc.len(), 3);
    // Allow one user's worth of seed noise between neighbours.
    assert!(acc.windows(2).all(|w| w[1] <= w[0] + 1.0 / 16.0), "{acc:?}");
}

#[test]
fn oracle_check_passes() {
    let tmp = TempDir::new().unwrap();
    let out = disagg(&["oracle-check", "--instances", "40", "--out", s(tmp.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("40/40"));
    assert!(tmp.path().join("oracle.json").exists());
}

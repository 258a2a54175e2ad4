use serde_json::Value;
use std::fs;
use std::path::Path;
use std::process::Command;

fn run(args: &[&str], out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_mflq"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("MFLQ_THREADS", "1")
        .output()
        .expect("spawn mflq")
        .status
        .code()
        .unwrap_or(-1)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn column(path: &Path, k: usize) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(k).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["solve-limit", "--preset", "example1"], dir.path()), 0);
    let bad = dir.path().join("bad");
    assert_eq!(run(&["solve-limit", "--preset", "example3"], &bad), 2);
    let v = json(&bad.join("verdict.json"));
    assert_eq!(v["solvable"], Value::Bool(false));
    assert!(fs::read_dir(&bad)
        .unwrap()
        .any(|e| e.unwrap().file_name().to_string_lossy().starts_with("partial_")));
    assert_eq!(run(&["solve-limit", "--preset", "nope"], &dir.path().join("x")), 1);
}

#[test]
fn manifest_lists_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["solve-finite", "--preset", "example1", "-N", "4"], dir.path()), 0);
    let m = json(&dir.path().join("manifest.json"));
    let files: Vec<&str> = m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["file"].as_str().unwrap())
        .collect();
    assert!(files.contains(&"Lambda1N.csv"));
    let head = fs::read_to_string(dir.path().join("Lambda1N.csv")).unwrap();
    assert!(head.starts_with("t,m_1_1\n"));
}

#[test]
fn oracle_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["oracle", "--preset", "example1", "-N", "3"], dir.path()), 0);
    assert_eq!(json(&dir.path().join("oracle.json"))["all_pass"], Value::Bool(true));
}

#[test]
fn mfg_difference_nonnegative_at_start() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["mfg-compare", "--preset", "example1"], dir.path()), 0);
    let d = column(&dir.path().join("difference.csv"), 1);
    assert!(d[0] >= -1e-8, "{}", d[0]);
}

#[test]
fn decoupled_gap_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(
            &["gap-sweep", "--preset", "decoupled_m0", "--N-list", "1..20"],
            dir.path()
        ),
        0
    );
    let g = column(&dir.path().join("gap.csv"), 1);
    assert_eq!(g.len(), 20);
    assert!(g.iter().all(|v| v.abs() < 1e-10));
    assert!(dir.path().join("sum-difference.csv").exists());
}

#[test]
fn simulate_agrees_with_exact_cost() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(
        &[
            "simulate", "--preset", "example1", "-N", "5", "--paths", "400", "--steps", "200",
        ],
        dir.path(),
    );
    assert_eq!(code, 0);
    let z = json(&dir.path().join("sim.json"))["z_score"].as_f64().unwrap();
    assert!(z.abs() < 4.0, "{z}");
}

use std::path::Path;
use std::process::{Command, Output};

fn nonauto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nonauto"))
        .args(args)
        .env_remove("NONAUTO_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const K2: &str = r#"
schema_version = 1
name = "k2-small"
description = "two nodes"
runtime_budget_seconds = 30
horizon = 1.0
seed = 3
checks = ["positivity", "stochastic", "quasi_contractivity"]

[grid]
points = 5

[model]
kind = "dynamic_graph"
nodes = 2
edges = [[0, 1, 1.0]]
"#;

fn write_scenario(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn passing_run_writes_reports_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let file = write_scenario(dir.path(), "k2.toml", K2);
    let out_dir = dir.path().join("out");
    let o = nonauto(&["--output-dir", out_dir.to_str().unwrap(), "run", &file]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS positivity"));
    for f in ["report.json", "summary.txt", "metadata.json"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], serde_json::Value::Bool(true));
    assert_eq!(report["schema_version"], 1);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["exit_code"], 0);
    assert!(meta["elapsed_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn failing_check_exits_two() {
    // mass leaks through the Dirichlet node, so the family is not stochastic
    let text = K2.replace("nodes = 2\n", "nodes = 3\ndirichlet = [2]\n").replace(
        "edges = [[0, 1, 1.0]]",
        "edges = [[0, 1, 1.0], [1, 2, 1.0]]",
    );
    let dir = tempfile::tempdir().unwrap();
    let file = write_scenario(dir.path(), "leak.toml", &text);
    let o = nonauto(&["--output-dir", dir.path().join("out").to_str().unwrap(), "run", &file]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stdout(&o).contains("FAIL stochastic"));
}

#[test]
fn grid_point_beyond_horizon_is_invalid_input() {
    let text = K2.replace("points = 5", "times = [0.0, 1.5]");
    let dir = tempfile::tempdir().unwrap();
    let file = write_scenario(dir.path(), "bad.toml", &text);
    let o = nonauto(&["run", &file]);
    assert_eq!(o.status.code(), Some(3));
    let e = stderr(&o);
    assert!(e.contains("grid.times[1]") && e.contains("horizon"), "{e}");
}

#[test]
fn unknown_field_and_missing_file_are_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let file = write_scenario(dir.path(), "typo.toml", &K2.replace("seed = 3", "seed = 3\nsed = 4"));
    let o = nonauto(&["run", &file]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("sed"), "{}", stderr(&o));
    let o = nonauto(&["run", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn describe_known_and_unknown_checks() {
    let o = nonauto(&["describe", "quasi-contractivity"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("quasi_contractivity"));
    let o = nonauto(&["describe", "quasi_contractivty"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("did you mean") && stderr(&o).contains("quasi_contractivity"), "{}", stderr(&o));
}

#[test]
fn list_scenarios_names_every_bundled_scenario() {
    let o = nonauto(&["list-scenarios"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for (name, _) in nonauto::scenario::BUNDLED {
        assert!(text.contains(name), "{name} not listed");
    }
    assert!(!text.contains("unreadable"));
}

#[test]
fn export_kernel_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let file = write_scenario(dir.path(), "k2.toml", K2);
    let o = nonauto(&["--output-dir", dir.path().to_str().unwrap(), "export-kernel", &file, "--t", "1", "--s", "0.5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("kernel_t1_s0.5.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,s,x,y,gamma,bound"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn seed_and_tolerance_overrides_reach_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let file = write_scenario(dir.path(), "k2.toml", K2);
    let out_dir = dir.path().join("o");
    let o = nonauto(&[
        "--seed",
        "99",
        "--tolerance-override",
        "1e-6",
        "--threads",
        "1",
        "--output-dir",
        out_dir.to_str().unwrap(),
        "run",
        &file,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 99);
    assert_eq!(report["tolerance"], 1e-6);
}

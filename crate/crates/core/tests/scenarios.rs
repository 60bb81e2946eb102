use std::process::Command;

use nonauto::scenario::{parse, BUNDLED};

/// Every bundled scenario passes through the CLI and finishes within the
/// budget declared in its header.
#[test]
fn bundled_scenarios_pass_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();
    for (name, text) in BUNDLED {
        let budget = parse(text, None, *name).unwrap().scenario.runtime_budget_seconds;
        let out_dir = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_nonauto"))
            .args(["--output-dir", out_dir.to_str().unwrap(), "run", name])
            .output()
            .unwrap();
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("metadata.json")).unwrap_or_default())
                .unwrap_or(serde_json::Value::Null);
        let elapsed = meta["elapsed_seconds"].as_f64().unwrap_or(f64::NAN);
        println!("{name}: exit {:?}, {elapsed:.2}s of {budget}s", o.status.code());
        if o.status.code() != Some(0) {
            problems.push(format!("{name}: exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
        } else if !(elapsed <= budget) {
            problems.push(format!("{name}: {elapsed:.2}s exceeds {budget}s"));
        }
    }
    assert!(problems.is_empty(), "{problems:#?}");
}

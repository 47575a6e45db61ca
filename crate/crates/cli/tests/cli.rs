use std::process::Command;

fn idql(out: &std::path::Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_idql"));
    cmd.env("IDQL_OUT", out).env("RUST_LOG", "warn");
    cmd
}

fn lines(bytes: &[u8]) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn audit_run_lands_under_idql_out() {
    let out = tempfile::tempdir().unwrap();
    let res = idql(out.path())
        .args(["audit", "--set", "audit_trials=5"])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report = lines(&res.stdout);
    assert_eq!(report.len(), 1);
    assert_eq!(report[0]["status"], "ok");
    assert_eq!(report[0]["kind"], "audit");
    let dir = std::path::PathBuf::from(report[0]["dir"].as_str().unwrap());
    assert!(dir.starts_with(out.path()));
    assert!(dir.join("manifest.json").is_file());
    assert!(dir.join("audit.json").is_file());
}

#[test]
fn seeds_run_in_parallel_workers() {
    let out = tempfile::tempdir().unwrap();
    let res = idql(out.path())
        .args(["bandit-sweep", "--seed", "1", "--seed", "2", "--jobs", "2"])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let mut seeds: Vec<u64> = lines(&res.stdout).iter().map(|l| l["seed"].as_u64().unwrap()).collect();
    seeds.sort();
    assert_eq!(seeds, [1, 2]);
    assert_eq!(std::fs::read_dir(out.path()).unwrap().count(), 2);
}

#[test]
fn config_file_overlays_the_preset() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("c.toml");
    std::fs::write(&cfg, "critic_steps = 77\n").unwrap();
    let res = idql(out.path())
        .args(["train-offline", "--print-config", "--config"])
        .arg(&cfg)
        .args(["--set", "seed=9"])
        .output()
        .unwrap();
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    assert!(text.contains("critic_steps = 77"));
    assert!(text.contains("seed = 9"));
    assert!(text.contains("kind = \"train-offline\""));
}

#[test]
fn failures_print_one_structured_error_line() {
    let out = tempfile::tempdir().unwrap();
    let res = idql(out.path()).args(["audit", "--set", "gamma=2.0"]).output().unwrap();
    assert_eq!(res.status.code(), Some(2));
    let err = lines(&res.stderr);
    let last = err.last().unwrap();
    assert_eq!(last["status"], "error");
    assert_eq!(last["kind"], "config");
    assert!(last["message"].as_str().unwrap().contains("gamma"));

    let res = idql(out.path()).args(["evaluate"]).output().unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(lines(&res.stderr).last().unwrap()["message"].as_str().unwrap().contains("checkpoint"));

    let res = idql(out.path())
        .args(["evaluate", "--set", "critic_checkpoint=\"/nonexistent/c\"", "--set", "behavior_checkpoint=\"/nonexistent/b\""])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(lines(&res.stderr).last().unwrap()["kind"], "io");
    assert_eq!(std::fs::read_dir(out.path()).unwrap().count(), 1, "failed run leaves only its own dir");
}

use std::path::Path;
use std::process::{Command, Output};

fn fedsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, algorithm: &str) -> String {
    let path = dir.join("cfg.json");
    let cfg = serde_json::json!({
        "task": {"kind": "logistic_regression", "inputs": 3},
        "data": {"partition": {"kind": "iid", "clients": 4, "samples": 60}},
        "algorithm": serde_json::from_str::<serde_json::Value>(algorithm).unwrap(),
        "trainer": {"learning_rate": 0.1},
        "rounds": 5,
        "seed": 9
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"name": "fedavg_fixed_epochs"}"#);
    let out = dir.path().join("out");
    let o = fedsim(&["run", "--config", &cfg, "--fold", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("algorithm fedavg_fixed_epochs"));
    for f in [
        "report.json",
        "metrics.csv",
        "cost.csv",
        "curves.csv",
        "global_fedavg_fixed_epochs.params",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let r = fedsim(&["report", "--in", out.to_str().unwrap()]);
    assert!(r.status.success());
    let text = stdout(&r);
    assert!(text.contains("accuracy"), "{text}");
    assert!(text.contains("fold 2: 5 rounds recorded"), "{text}");

    // the same run with another seed override changes the hash
    let o2 = fedsim(&[
        "run",
        "--config",
        &cfg,
        "--fold",
        "2",
        "--seed",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o2.status.success());
    let hash = |s: &str| s.lines().next().unwrap().split("hash ").nth(1).unwrap().to_string();
    assert_ne!(hash(&stdout(&o)), hash(&stdout(&o2)));
}

#[test]
fn worker_count_does_not_change_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"name": "fedpidavg"}"#);
    let out = dir.path().join("out");
    let first = |w: &str| {
        let o = fedsim(&["run", "--config", &cfg, "--workers", w, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        stdout(&o).lines().next().unwrap().to_string()
    };
    assert_eq!(first("1"), first("3"));
}

#[test]
fn cost_and_partition() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"name": "scaffold"}"#);
    let csv = dir.path().join("cost.csv");
    let o = fedsim(&["cost", "--config", &cfg, "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success());
    let table = stdout(&o);
    assert!(table.contains("fedavg_fixed_iterations"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 16);

    let o = fedsim(&["partition", "--config", &cfg, "--summary"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("4 clients, 60 samples"), "{text}");
    assert_eq!(
        text.lines()
            .filter(|l| l.trim_start().starts_with(char::is_numeric))
            .count(),
        5
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(
        fedsim(&["run", "--config", missing.to_str().unwrap()]).status.code(),
        Some(2)
    );

    let cfg = write_config(dir.path(), r#"{"name": "fedavg_fixed_epochs"}"#);
    assert_eq!(fedsim(&["run", "--config", &cfg, "--fold", "9"]).status.code(), Some(2));

    let bad = write_config(dir.path(), r#"{"name": "fedsgd"}"#);
    assert_eq!(fedsim(&["cost", "--config", &bad]).status.code(), Some(2));

    // divergence is a runtime failure
    let path = dir.path().join("diverge.json");
    std::fs::write(
        &path,
        r#"{"task": {"kind": "linear_regression", "inputs": 2},
            "data": {"partition": {"kind": "iid", "clients": 2, "samples": 40}},
            "algorithm": {"name": "fedavg_fixed_epochs"},
            "trainer": {"learning_rate": 1e6}, "rounds": 40}"#,
    )
    .unwrap();
    let o = fedsim(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("round "));

    assert_eq!(
        fedsim(&["report", "--in", dir.path().to_str().unwrap()]).status.code(),
        Some(2)
    );
}

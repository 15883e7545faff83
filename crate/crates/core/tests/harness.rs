use std::collections::BTreeMap;

use fedsim::harness::{
    emit_report, read_params, read_report, run_centralized, run_experiment, ExperimentConfig, FoldChoice, RunReport,
};
use fedsim::tasks::{Objective, TaskModel};
use fedsim::ParamVector;
use nalgebra::{DMatrix, DVector};

fn config(json: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(json).unwrap()
}

fn logistic(algorithm: &str, rounds: usize) -> ExperimentConfig {
    config(&format!(
        r#"{{
            "task": {{"kind": "logistic_regression", "inputs": 4}},
            "data": {{
                "partition": {{"kind": "power_law", "clients": 5, "largest": 40, "smallest": 12, "exponent": 0.7, "groups": 2}},
                "feature_shift": 0.5
            }},
            "algorithm": {algorithm},
            "trainer": {{"learning_rate": 0.1}},
            "rounds": {rounds},
            "seed": 11
        }}"#
    ))
}

fn assert_close(a: &ParamVector, b: &ParamVector, tol: f64) {
    let d = a.max_abs_diff(b).unwrap();
    let scale = a.norm().max(1.0);
    assert!(d <= tol * scale, "max diff {d}");
}

#[test]
fn single_client_fedavg_matches_centralized() {
    let json = |alg: &str| {
        format!(
            r#"{{
                "task": {{"kind": "linear_regression", "inputs": 3}},
                "data": {{"partition": {{"kind": "iid", "clients": 1, "samples": 60}}}},
                "algorithm": {{"name": "{alg}"}},
                "trainer": {{"learning_rate": 0.05}},
                "rounds": 25,
                "seed": 3
            }}"#
        )
    };
    let fed = run_experiment(&config(&json("fedavg_fixed_epochs"))).unwrap();
    let cen = run_experiment(&config(&json("centralized"))).unwrap();
    assert_close(fed.last.as_ref().unwrap(), cen.last.as_ref().unwrap(), 1e-12);
    assert_close(fed.global.as_ref().unwrap(), cen.global.as_ref().unwrap(), 1e-12);
}

#[test]
fn qfedavg_without_fairness_is_uniform_fedavg() {
    for rounds in [1, 4] {
        let mut q = logistic(r#"{"name": "qfedavg", "q": 0}"#, rounds);
        let mut avg = logistic(r#"{"name": "fedavg_uniform"}"#, rounds);
        q.trainer.lr_decay_factor = Some(0.99);
        avg.trainer.lr_decay_factor = Some(0.99);
        let a = run_experiment(&q).unwrap();
        let b = run_experiment(&avg).unwrap();
        assert_close(a.last.as_ref().unwrap(), b.last.as_ref().unwrap(), 1e-12);
    }
}

#[test]
fn same_config_same_hash_across_workers() {
    let mut cfg = logistic(r#"{"name": "scaffold"}"#, 6);
    cfg.workers = Some(1);
    let a = run_experiment(&cfg).unwrap().report;
    cfg.workers = Some(4);
    let b = run_experiment(&cfg).unwrap().report;
    let c = run_experiment(&cfg).unwrap().report;
    assert_eq!(a.content_hash, b.content_hash);
    assert_eq!(b.content_hash, c.content_hash);
    assert_eq!(a.content_hash, a.compute_hash().unwrap());

    cfg.seed += 1;
    let d = run_experiment(&cfg).unwrap().report;
    assert_ne!(a.content_hash, d.content_hash);
}

#[test]
fn best_checkpoint_has_minimum_validation_loss() {
    let out = run_experiment(&logistic(r#"{"name": "fedavg_fixed_epochs"}"#, 15)).unwrap();
    let fold = &out.report.folds[0];
    let best = fold.best.as_ref().unwrap();
    let min = fold
        .curves
        .iter()
        .map(|p| p.global_val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(best.val_loss, min);
    assert!(fold.curves.iter().all(|p| p.participants == 5));
    assert_eq!(fold.curves.len(), 15);
}

#[test]
fn every_algorithm_runs() {
    let algorithms = [
        r#"{"name": "centralized"}"#,
        r#"{"name": "local_only", "client_id": 2}"#,
        r#"{"name": "fedavg_fixed_epochs"}"#,
        r#"{"name": "fedavg_fixed_epochs", "weighting": "uniform"}"#,
        r#"{"name": "fedavg_uniform"}"#,
        r#"{"name": "fedavg_fixed_iterations", "iterations": 3}"#,
        r#"{"name": "fednova"}"#,
        r#"{"name": "fedadam", "server_lr": 0.01}"#,
        r#"{"name": "scaffold"}"#,
        r#"{"name": "qfedavg", "q": 1}"#,
        r#"{"name": "fedpidavg"}"#,
        r#"{"name": "local_finetuning", "epochs": 3, "source": {"pretrain_rounds": 3}}"#,
        r#"{"name": "ditto", "epochs": 3, "lambda": 0.5, "source": {"pretrain_rounds": 3}}"#,
        r#"{"name": "fedper"}"#,
        r#"{"name": "lg_fedavg"}"#,
        r#"{"name": "cfl", "schedule": {"2": [0]}}"#,
        r#"{"name": "prior_cfl", "source": {"pretrain_rounds": 2}}"#,
    ];
    for alg in algorithms {
        let cfg = logistic(alg, 4);
        let out = run_experiment(&cfg).unwrap_or_else(|e| panic!("{alg}: {e}"));
        let fold = &out.report.folds[0];
        assert!(!fold.curves.is_empty(), "{alg}");
        assert!(fold.cost.total_steps > 0, "{alg}");
        assert_eq!(out.models.len(), 5, "{alg}");
        assert!(out.report.metrics.mean("loss").unwrap().is_finite(), "{alg}");
        assert!(out.report.metrics.mean("accuracy").is_some(), "{alg}");
        if cfg.algorithm.is_personalized() {
            assert_eq!(fold.client_best.len(), 5, "{alg}");
        } else {
            assert!(fold.best.is_some(), "{alg}");
        }
    }
}

#[test]
fn cfl_split_is_recorded() {
    let out = run_experiment(&logistic(r#"{"name": "cfl", "schedule": {"3": [0]}}"#, 5)).unwrap();
    let clusters = out.report.folds[0].clusters.as_ref().unwrap();
    assert_eq!(clusters.splits.len(), 1);
    assert_eq!(clusters.splits[0].round, 3);
    assert_eq!(clusters.clusters.len(), 2);
    let mut all: Vec<usize> = clusters.clusters.iter().flat_map(|c| c.members.clone()).collect();
    all.sort_unstable();
    assert_eq!(all, vec![1, 2, 3, 4, 5]);
}

#[test]
fn finetuning_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let pre = run_experiment(&logistic(r#"{"name": "fedavg_fixed_epochs"}"#, 5)).unwrap();
    let path = dir.path().join("global.params");
    fedsim::harness::write_params(pre.global.as_ref().unwrap(), &path).unwrap();

    let alg = format!(
        r#"{{"name": "local_finetuning", "epochs": 0, "source": {{"checkpoint": {}}}}}"#,
        serde_json::to_string(&path).unwrap()
    );
    let out = run_experiment(&logistic(&alg, 1)).unwrap();
    for w in out.models.values() {
        assert_eq!(w, pre.global.as_ref().unwrap());
    }

    // a checkpoint of the wrong task is a configuration error
    let wrong = config(&format!(
        r#"{{
            "task": {{"kind": "linear_regression", "inputs": 2}},
            "data": {{"partition": {{"kind": "iid", "clients": 3, "samples": 30}}}},
            "algorithm": {alg},
            "rounds": 1
        }}"#
    ));
    assert!(run_experiment(&wrong).unwrap_err().is_config());
}

#[test]
fn ditto_without_penalty_is_local_finetuning() {
    let a = run_experiment(&logistic(
        r#"{"name": "ditto", "lambda": 0, "epochs": 4, "source": {"pretrain_rounds": 3}}"#,
        1,
    ))
    .unwrap();
    let b = run_experiment(&logistic(
        r#"{"name": "local_finetuning", "epochs": 4, "source": {"pretrain_rounds": 3}}"#,
        1,
    ))
    .unwrap();
    assert_eq!(a.models, b.models);
}

#[test]
fn voxel_task_reports_segmentation_metrics() {
    let cfg = config(
        r#"{
            "task": {"kind": "voxel_dice", "channels": 2, "grid": [4, 4, 4]},
            "data": {"partition": {"kind": "iid", "clients": 3, "samples": 45}},
            "algorithm": {"name": "fedavg_fixed_epochs"},
            "rounds": 3,
            "seed": 5
        }"#,
    );
    let out = run_experiment(&cfg).unwrap();
    let m = &out.report.metrics;
    let dice = m.mean("dice").unwrap();
    assert!((0.0..=1.0).contains(&dice));
    assert!(m.overall.contains_key("hd95"));
    let total: usize = out.report.folds[0].sizes.iter().map(|s| s.test).sum();
    assert_eq!(m.samples.len(), total);
}

#[test]
fn report_round_trip_and_files() {
    let mut cfg = logistic(r#"{"name": "fedavg_fixed_epochs"}"#, 7);
    cfg.folds.fold = FoldChoice::All(serde_json::from_str("\"all\"").unwrap());
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.report.folds.len(), 5);
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&out.report, &out.models, out.global.as_ref(), dir.path()).unwrap();
    for name in ["report.json", "metrics.csv", "cost.csv", "curves.csv"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    assert!(files.iter().all(|f| f.is_file()));

    let back = read_report(dir.path()).unwrap();
    assert_eq!(back, out.report);
    assert_eq!(back.compute_hash().unwrap(), out.report.content_hash);

    let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 5 * 7);
    let global = read_params(&dir.path().join("fold_4/global_fedavg_fixed_epochs.params")).unwrap();
    assert_eq!(&global, out.global.as_ref().unwrap());
}

#[test]
fn empty_metrics_still_emit_valid_json() {
    let cfg = logistic(r#"{"name": "fedavg_fixed_epochs"}"#, 1);
    let report = RunReport::new(cfg, Vec::new(), Default::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, &BTreeMap::new(), None, dir.path()).unwrap();
    assert_eq!(read_report(dir.path()).unwrap(), report);
}

#[test]
fn io_failures_carry_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let report = RunReport::new(logistic(r#"{"name": "fednova"}"#, 1), Vec::new(), Default::default()).unwrap();
    let err = emit_report(&report, &BTreeMap::new(), None, &blocker.join("sub")).unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
}

#[test]
fn errors_name_round_and_client() {
    // a huge learning rate diverges and the failing round is reported
    let mut cfg = logistic(r#"{"name": "fedavg_fixed_epochs"}"#, 50);
    cfg.task = serde_json::from_str(r#"{"kind": "linear_regression", "inputs": 4}"#).unwrap();
    cfg.trainer.learning_rate = Some(1e6);
    let err = run_experiment(&cfg).unwrap_err().to_string();
    assert!(err.starts_with("round "), "{err}");
    assert!(err.contains("client "), "{err}");
}

#[test]
fn centralized_linear_regression_reaches_least_squares() {
    let cfg = config(
        r#"{
            "task": {"kind": "linear_regression", "inputs": 3},
            "data": {
                "partition": {"kind": "iid", "clients": 4, "samples": 80},
                "synth": {"noise": 0.0}
            },
            "algorithm": {"name": "fedavg_fixed_epochs"},
            "trainer": {"learning_rate": 0.05, "weight_decay": 0.0},
            "rounds": 300,
            "seed": 2
        }"#,
    );
    let out = run_centralized(&cfg).unwrap();
    let w = out.last.unwrap();

    let fed = fedsim::harness::build_federation(&cfg).unwrap();
    let clients = fed.fold_data(0).unwrap();
    let train: Vec<_> = clients.iter().flat_map(|c| c.train.samples.iter()).collect();
    let task = TaskModel::new(cfg.task.clone()).unwrap();
    let mean_loss =
        |w: &ParamVector| train.iter().map(|s| task.sample_loss(w, s).unwrap()).sum::<f64>() / train.len() as f64;

    // normal equations with an intercept column
    let x = DMatrix::from_fn(train.len(), 4, |i, j| if j < 3 { train[i].x[j] } else { 1.0 });
    let y = DVector::from_iterator(train.len(), train.iter().map(|s| s.y[0]));
    let beta = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * y;
    let opt = ParamVector::new(beta.iter().copied().collect(), w.layout().clone()).unwrap();

    let gap = mean_loss(&w) - mean_loss(&opt);
    assert!(gap.abs() <= 1e-6, "loss gap {gap}");
}

#[test]
fn config_errors_are_reported_as_such() {
    let bad = ExperimentConfig::from_json(
        r#"{"task": {"kind": "linear_regression", "inputs": 2}, "algorithm": {"name": "fedsgd"}}"#,
    );
    assert!(bad.unwrap_err().is_config());
    let cfg = logistic(r#"{"name": "local_only", "client_id": 42}"#, 2);
    assert!(run_experiment(&cfg).unwrap_err().is_config());
    let cfg = logistic(
        r#"{"name": "prior_cfl", "labels": {"explicit": {"1": "a"}}, "source": {"pretrain_rounds": 1}}"#,
        2,
    );
    assert!(run_experiment(&cfg).unwrap_err().is_config());
}

#[test]
fn centralized_budget_on_the_challenge_layout() {
    let cfg = config(
        r#"{
            "task": {"kind": "logistic_regression", "inputs": 8},
            "data": {"partition": {"kind": "challenge"}},
            "algorithm": {"name": "centralized"},
            "rounds": 300
        }"#,
    );
    let t = std::time::Instant::now();
    let out = run_centralized(&cfg).unwrap();
    assert_eq!(out.report.folds[0].curves.len(), 300);
    assert!(t.elapsed() < std::time::Duration::from_secs(60), "{:?}", t.elapsed());
}

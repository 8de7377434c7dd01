//! Binary-level tests of the harness: flags, exit codes, file outputs, and
//! byte-level determinism.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pdlds"))
}

fn run(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("PDLDS_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn generate_small(dir: &Path, seed: u64) -> Output {
    run(
        &[
            "generate",
            "--system",
            "nascar",
            "--trials",
            "4",
            "--length",
            "60",
            "--obs-dim",
            "5",
            "--seed",
            &seed.to_string(),
            "--out",
            dir.to_str().unwrap(),
        ],
        None,
    )
}

#[test]
fn generate_requires_out_flag() {
    let out = run(
        &["generate", "--system", "nascar", "--trials", "2", "--length", "10", "--obs-dim", "4", "--seed", "1"],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_writes_expected_files_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("a");
    let d2 = tmp.path().join("b");
    let out1 = generate_small(&d1, 9);
    assert!(out1.status.success(), "{}", String::from_utf8_lossy(&out1.stderr));
    assert!(d1.join("meta.json").exists());
    for i in 0..4 {
        assert!(d1.join(format!("trial_{i}.csv")).exists());
    }
    let out2 = generate_small(&d2, 9);
    let hash = |o: &Output| {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .find(|l| l.starts_with("sha256 "))
            .unwrap()
            .to_string()
    };
    assert_eq!(hash(&out1), hash(&out2));
    assert_eq!(read_dir_bytes(&d1), read_dir_bytes(&d2));
}

#[test]
fn fit_and_eval_round_trip_with_paper_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(generate_small(&data, 3).status.success());

    let model_dir = tmp.path().join("model");
    let fit = run(
        &[
            "fit", "--model", "pdlds", "--data", data.to_str().unwrap(), "--k", "2", "--n", "2",
            "--window", "full", "--xi", "0.945", "--seed", "1", "--max-iters", "6", "--train-split",
            "--out", model_dir.to_str().unwrap(),
        ],
        None,
    );
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    assert!(model_dir.join("model.json").exists());
    assert!(model_dir.join("elbo_trace.csv").exists());
    assert!(model_dir.join("fit.log").exists());

    let metrics = tmp.path().join("metrics.json");
    let eval = run(
        &[
            "eval", "--model-file", model_dir.join("model.json").to_str().unwrap(), "--data",
            data.to_str().unwrap(), "--split", "train", "--k-steps", "1,10",
            "--out", metrics.to_str().unwrap(),
        ],
        None,
    );
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    let r2_1 = report["aggregate"]["r2"]["k1"].as_f64().unwrap();
    let r2_10 = report["aggregate"]["r2"]["k10"].as_f64().unwrap();
    assert!(r2_1.is_finite() && r2_10.is_finite());
    assert!(r2_1 > r2_10, "error must grow with horizon: {r2_1} vs {r2_10}");
    assert!(report["aggregate"]["dynamics_mse"].as_f64().unwrap().is_finite());
    assert!(report["aggregate"]["switch_mse"].as_f64().unwrap().is_finite());
}

#[test]
fn fit_dlds_with_lambda_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(generate_small(&data, 5).status.success());
    let model_dir = tmp.path().join("model");
    let fit = run(
        &[
            "fit", "--model", "dlds", "--data", data.to_str().unwrap(), "--k", "2", "--n", "2",
            "--lambda0", "0.628", "--lambda1", "2.010", "--lambda2", "0.0124", "--seed", "2",
            "--max-iters", "3", "--out", model_dir.to_str().unwrap(),
        ],
        None,
    );
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    assert!(model_dir.join("objective_trace.csv").exists());
    let ck: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(model_dir.join("model.json")).unwrap()).unwrap();
    assert_eq!(ck["kind"], "dlds");
}

#[test]
fn eval_rejects_excess_horizon_with_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(generate_small(&data, 7).status.success());
    let model_dir = tmp.path().join("model");
    let fit = run(
        &[
            "fit", "--model", "pdlds", "--data", data.to_str().unwrap(), "--k", "2", "--n", "2",
            "--window", "full", "--xi", "1.0", "--seed", "1", "--max-iters", "2",
            "--out", model_dir.to_str().unwrap(),
        ],
        None,
    );
    assert!(fit.status.success());
    let eval = run(
        &[
            "eval", "--model-file", model_dir.join("model.json").to_str().unwrap(), "--data",
            data.to_str().unwrap(), "--split", "test", "--k-steps", "100",
        ],
        None,
    );
    assert_eq!(eval.status.code(), Some(3), "{}", String::from_utf8_lossy(&eval.stderr));
}

#[test]
fn eval_rejects_dimension_mismatch_with_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data5 = tmp.path().join("data5");
    assert!(generate_small(&data5, 11).status.success());
    let data8 = tmp.path().join("data8");
    let gen8 = run(
        &[
            "generate", "--system", "nascar", "--trials", "4", "--length", "60", "--obs-dim", "8",
            "--seed", "11", "--out", data8.to_str().unwrap(),
        ],
        None,
    );
    assert!(gen8.status.success());
    let model_dir = tmp.path().join("model");
    let fit = run(
        &[
            "fit", "--model", "pdlds", "--data", data5.to_str().unwrap(), "--k", "2", "--n", "2",
            "--window", "full", "--xi", "1.0", "--seed", "1", "--max-iters", "2",
            "--out", model_dir.to_str().unwrap(),
        ],
        None,
    );
    assert!(fit.status.success());
    let eval = run(
        &[
            "eval", "--model-file", model_dir.join("model.json").to_str().unwrap(), "--data",
            data8.to_str().unwrap(), "--split", "test", "--k-steps", "5",
        ],
        None,
    );
    assert_eq!(eval.status.code(), Some(3));
}

#[test]
fn search_budget_and_range_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(generate_small(&data, 13).status.success());

    let bad = run(
        &[
            "search", "--model", "pdlds", "--data", data.to_str().unwrap(), "--budget", "0",
            "--seed", "1", "--k", "2", "--n", "2",
        ],
        None,
    );
    assert_eq!(bad.status.code(), Some(2));

    let csv1 = tmp.path().join("s1.csv");
    let one = run(
        &[
            "search", "--model", "pdlds", "--data", data.to_str().unwrap(), "--budget", "1",
            "--seed", "4", "--k", "2", "--n", "2", "--fit-iters", "2",
            "--out", csv1.to_str().unwrap(),
        ],
        None,
    );
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    let body = std::fs::read_to_string(&csv1).unwrap();
    assert_eq!(body.lines().count(), 2, "header plus exactly one row:\n{body}");

    let csv5 = tmp.path().join("s5.csv");
    let five = run(
        &[
            "search", "--model", "pdlds", "--data", data.to_str().unwrap(), "--budget", "5",
            "--seed", "4", "--k", "2", "--n", "2", "--fit-iters", "2",
            "--out", csv5.to_str().unwrap(),
        ],
        None,
    );
    assert!(five.status.success());
    let body5 = std::fs::read_to_string(&csv5).unwrap();
    assert_eq!(body5.lines().count(), 6);
    for line in body5.lines().skip(1) {
        let xi: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((1e-3..=1e3).contains(&xi), "xi out of range: {xi}");
    }

    let csv5b = tmp.path().join("s5b.csv");
    let again = run(
        &[
            "search", "--model", "pdlds", "--data", data.to_str().unwrap(), "--budget", "5",
            "--seed", "4", "--k", "2", "--n", "2", "--fit-iters", "2",
            "--out", csv5b.to_str().unwrap(),
        ],
        None,
    );
    assert!(again.status.success());
    assert_eq!(std::fs::read(&csv5).unwrap(), std::fs::read(&csv5b).unwrap());
}

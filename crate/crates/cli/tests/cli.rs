use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn rlad() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rlad"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    rlad().args(args).output().expect("spawn rlad")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, name: &str, n: usize, rate: f64, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let status = run(&[
        "generate",
        "--kind",
        "spike",
        "--n",
        &n.to_string(),
        "--rate",
        &rate.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        p(&out),
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    out
}

/// Rows of a Yahoo-format CSV as (timestamp, value, label).
fn read_rows(path: &Path) -> Vec<(String, String, String)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_string(), rec[1].to_string(), rec[2].to_string())
        })
        .collect()
}

fn write_rows(path: &Path, rows: &[(String, String, String)]) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["timestamp", "value", "is_anomaly"]).unwrap();
    for (t, v, l) in rows {
        w.write_record([t, v, l]).unwrap();
    }
    w.flush().unwrap();
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"window": 10, "hidden_size": 4, "episodes": 2, "batch_size": 8, "iforest_trees": 20,
            "label_prop": {"pool_cap": 200, "max_iter": 200}, "seed": 3}"#,
    )
    .unwrap();
    cfg
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "s.csv", 400, 0.02, 1);
    let preds = dir.path().join("preds.csv");
    let mut w = csv::Writer::from_path(&preds).unwrap();
    w.write_record(["end_index", "prediction"]).unwrap();
    for (i, (_, _, label)) in read_rows(&data).iter().enumerate() {
        w.write_record([i.to_string(), label.clone()]).unwrap();
    }
    w.flush().unwrap();

    let out = run(&["evaluate", "--preds", p(&preds), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(0));
    let metrics: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["f1"], 1.0);
    assert_eq!(metrics["fp"], 0);
    assert_eq!(metrics["fn"], 0);
}

#[test]
fn usage_errors_exit_1() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["generate", "--n", "10"]);
    assert_eq!(out.status.code(), Some(1), "missing --out is a usage error");
    let out = run(&["train", "--data", "x.csv", "--out", "r", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_2_and_name_the_path() {
    let out = run(&["evaluate", "--preds", "/nonexistent/preds.csv", "--data", "/nonexistent/data.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/data.csv"));

    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "s.csv", 300, 0.01, 2);
    let out = run(&["train", "--data", p(&data), "--out", p(&dir.path().join("r")), "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--data", p(&data), "--out", p(&dir.path().join("r")), "--queries-per-episode", "11"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.csv", 10_000, 0.003, 7);
    let b = generate(dir.path(), "b.csv", 10_000, 0.003, 7);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let anomalies = read_rows(&a).iter().filter(|r| r.2 == "1").count();
    assert_eq!(anomalies, 30);
}

#[test]
fn same_argv_gives_identical_history_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "s.csv", 800, 0.01, 4);
    let cfg = small_config(dir.path());
    let train = |out: &str| {
        let out = dir.path().join(out);
        let res = run(&["train", "--data", p(&data), "--config", p(&cfg), "--episodes", "3", "--set", "label_prop.sigma=0.1", "--out", p(&out)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        out
    };
    let (a, b) = (train("ra"), train("rb"));
    let history = |d: &Path| std::fs::read(d.join("history.csv")).unwrap();
    assert_eq!(history(&a), history(&b));
    assert_eq!(String::from_utf8(history(&a)).unwrap().lines().count(), 4);

    let resolved: Value = serde_json::from_str(&std::fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["episodes"], 3);
    assert_eq!(resolved["window"], 10);
    assert_eq!(resolved["label_prop"]["sigma"], 0.1);

    // the written config reproduces the run on its own
    let c = dir.path().join("rc");
    let res = run(&["train", "--data", p(&data), "--config", p(&a.join("config.json")), "--out", p(&c)]);
    assert!(res.status.success());
    assert_eq!(history(&a), history(&c));
}

#[test]
fn full_pipeline_on_seeded_spike_series() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "s.csv", 10_000, 0.003, 7);
    let rows = read_rows(&data);
    let held_out = dir.path().join("t.csv");
    write_rows(&held_out, &rows[8000..]);

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, include_str!("e2e_config.json")).unwrap();
    let run_dir = dir.path().join("run");
    let res = run(&["train", "--data", p(&data), "--format", "yahoo", "--oracle", "scripted", "--config", p(&cfg), "--out", p(&run_dir)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["config.json", "history.csv", "checkpoint.json", "model.json", "metrics.json"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }

    let preds = dir.path().join("preds.csv");
    let res = run(&["predict", "--model", p(&run_dir), "--data", p(&held_out), "--out", p(&preds)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let lines = std::fs::read_to_string(&preds).unwrap();
    assert!(lines.starts_with("end_index,prediction\n"));
    assert_eq!(lines.lines().count(), 1 + 2000 - 25 + 1);

    let res = run(&["evaluate", "--preds", p(&preds), "--data", p(&held_out)]);
    assert_eq!(res.status.code(), Some(0));
    let metrics: Value = serde_json::from_slice(&res.stdout).unwrap();
    let f1 = metrics["f1"].as_f64().unwrap();
    assert!(f1 >= 0.9, "held-out f1 {f1}: {metrics}");
}

#[test]
fn human_oracle_training_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "s.csv", 600, 0.01, 5);
    let truth: Vec<u8> = read_rows(&data).iter().map(|r| r.2.parse().unwrap()).collect();
    let cfg = small_config(dir.path());
    let run_dir = dir.path().join("run");
    let mut child = rlad()
        .args(["train", "--data", p(&data), "--config", p(&cfg), "--oracle", "human", "--addr", "127.0.0.1:0", "--out", p(&run_dir)])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();

    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let base = loop {
        let mut line = String::new();
        assert!(stderr.read_line(&mut line).unwrap() > 0, "service never announced its address");
        if let Some(url) = line.trim().strip_prefix("labeling service at ") {
            break url.to_string();
        }
    };
    std::thread::spawn(move || std::io::copy(&mut stderr, &mut std::io::sink()));

    let client = reqwest::blocking::Client::new();
    let deadline = Instant::now() + Duration::from_secs(120);
    let mut batches = 0;
    while child.try_wait().unwrap().is_none() {
        assert!(Instant::now() < deadline, "training did not finish");
        let resp = client.get(format!("{base}/api/queries")).send();
        let Ok(resp) = resp else { break };
        if resp.status() == reqwest::StatusCode::OK {
            let batch: Value = resp.json().unwrap();
            let labels: Vec<Value> = batch["items"]
                .as_array()
                .unwrap()
                .iter()
                .map(|it| {
                    let end = it["end_index"].as_u64().unwrap() as usize;
                    serde_json::json!({ "index": it["index"], "label": truth[end] })
                })
                .collect();
            let ack: Value = client
                .post(format!("{base}/api/labels"))
                .json(&serde_json::json!({ "batch_id": batch["batch_id"], "labels": labels }))
                .send()
                .unwrap()
                .json()
                .unwrap();
            assert_eq!(ack["complete"], true);
            batches += 1;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(child.wait().unwrap().success());
    assert_eq!(batches, 3, "warm-up batch plus one per episode");
    let history = std::fs::read_to_string(run_dir.join("history.csv")).unwrap();
    let last = history.lines().last().unwrap();
    assert_eq!(last.split(',').nth(2), Some("25"));
}

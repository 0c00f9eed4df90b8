use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hindsight_attrib::commands::{checksum_tree, MetricsTable, Summary};
use hindsight_attrib::pipeline::AgentCheckpoint;
use hindsight_core::backtest::{metrics_from_values, PERIODS_PER_YEAR};
use hindsight_core::rl::{AgentBundle, Hyperparams};
use serde_json::{json, Value};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_hindsight-attrib");

fn base_config() -> Value {
    json!({
        "schema_version": 1,
        "data": {"synthetic": {"n_assets": 6, "n_days": 240, "alpha": 0.02, "seed": 5}},
        "train": {"start": "2015-01-02", "end": "2015-07-31"},
        "trade": {"start": "2015-08-03", "end": "2015-12-31"},
        "lambda": 300.0,
        "cov_window": 30,
        "train_steps": 200,
        "agent": {"hidden": [8], "rollout_len": 32},
        "ml": {"n_trees": 3},
        "seed": 2,
        "output_dir": "out"
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

/// Column of a CSV as optional floats (empty cells are `None`).
fn csv_column(p: &Path, name: &str) -> Vec<Option<f64>> {
    let mut rdr = csv::Reader::from_path(p).unwrap();
    let col = rdr.headers().unwrap().iter().position(|h| h == name).unwrap();
    rdr.records()
        .map(|r| {
            let cell = r.unwrap()[col].to_string();
            (!cell.is_empty()).then(|| cell.parse().unwrap())
        })
        .collect()
}

fn mean_defined(xs: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = xs.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

fn full_run(cfg: &Value) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), cfg);
    ok(&run(&["all"], &path));
    let out = dir.path().join("out");
    (dir, out)
}

#[test]
fn full_run_writes_every_artifact() {
    let (_dir, out) = full_run(&base_config());
    let models = ["a2c", "ppo", "lr", "dt", "rf", "svm"];
    let mut expected: Vec<String> = vec![
        "ingest/panel.csv".into(),
        "ingest/features.csv".into(),
        "backtest/metrics.json".into(),
        "backtest/equal_weight.csv".into(),
        "backtest/hindsight.csv".into(),
        "explain/reference.csv".into(),
        "explain/reference_smoothed.csv".into(),
        "explain/summary.json".into(),
        "explain/histograms.json".into(),
        "explain/skipped.json".into(),
        "explain/table.json".into(),
        "explain/weights/hindsight.csv".into(),
        "explain/correlations/hindsight.csv".into(),
        "curves/a2c.csv".into(),
        "curves/ppo.csv".into(),
        "manifest.json".into(),
    ];
    for m in models {
        expected.push(format!("models/{m}.json"));
        expected.push(format!("backtest/{m}.csv"));
        expected.push(format!("explain/weights/{m}.csv"));
        expected.push(format!("explain/correlations/{m}.csv"));
    }
    for rel in &expected {
        assert!(out.join(rel).is_file(), "{rel} missing");
    }
    let manifest: BTreeMap<String, String> = read_json(&out.join("manifest.json"));
    for rel in expected.iter().filter(|r| *r != "manifest.json") {
        assert!(manifest.contains_key(rel), "{rel} not in manifest");
    }
}

#[test]
fn summary_table_and_series_agree() {
    let (_dir, out) = full_run(&base_config());
    let summary: Summary = read_json(&out.join("explain/summary.json"));
    let table: MetricsTable = read_json(&out.join("explain/table.json"));

    // Hindsight weights explained against themselves.
    let hs = summary.model("hindsight").unwrap();
    assert!((hs.mean_single.unwrap() - 1.0).abs() < 1e-12);

    for m in &summary.models {
        let p = out.join(format!("explain/correlations/{}.csv", m.name));
        let single = csv_column(&p, "rho_single");
        let multi = csv_column(&p, "rho_multi");
        let (ms, mm) = (mean_defined(&single), mean_defined(&multi));
        assert_eq!(ms.is_some(), m.mean_single.is_some(), "{}", m.name);
        if let (Some(a), Some(b)) = (ms, m.mean_single) {
            assert!((a - b).abs() <= 1e-9, "{}: {a} vs {b}", m.name);
        }
        if let (Some(a), Some(b)) = (mm, m.mean_multi) {
            assert!((a - b).abs() <= 1e-9, "{}: {a} vs {b}", m.name);
        }
        assert_eq!(single.iter().flatten().count(), m.n_single);

        let col = table.columns.iter().position(|c| *c == m.name).unwrap();
        assert_eq!(table.values[5][col].as_f64(), m.mean_single);
        assert_eq!(table.values[6][col].as_f64(), m.mean_multi);
    }
    assert!(table.columns.iter().any(|c| c == "equal_weight"));
    assert_eq!(table.rows.len(), 7);
    assert!(table.values.iter().all(|r| r.len() == table.columns.len()));
}

#[test]
fn backtest_metrics_match_the_shipped_curves() {
    let (_dir, out) = full_run(&base_config());
    let table: MetricsTable = read_json(&out.join("backtest/metrics.json"));
    assert!(table.metrics.contains_key("equal_weight"));
    assert!(table.metrics.contains_key("hindsight"));
    for (name, m) in &table.metrics {
        let p = out.join(format!("backtest/{name}.csv"));
        let mut values = vec![1.0];
        values.extend(csv_column(&p, "value").into_iter().map(Option::unwrap));
        let again = metrics_from_values(&values, PERIODS_PER_YEAR, 0.0).unwrap();
        let close = |a: f64, b: f64| a == b || (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        assert_eq!(again.n_slots, m.n_slots);
        assert!(close(again.annual_return, m.annual_return), "{name}");
        assert!(close(again.annual_volatility, m.annual_volatility), "{name}");
        assert!(close(again.max_drawdown, m.max_drawdown), "{name}");
        assert!(close(again.calmar, m.calmar), "{name}");
        match (again.sharpe, m.sharpe) {
            (Some(a), Some(b)) => assert!(close(a, b), "{name}"),
            (a, b) => assert_eq!(a, b),
        }
        let log_sum: f64 = csv_column(&p, "return").into_iter().map(Option::unwrap).sum();
        assert!((log_sum.exp() - values.last().unwrap()).abs() <= 1e-9 * values.last().unwrap());
    }
}

#[test]
fn unit_window_makes_single_and_multi_equal() {
    let mut cfg = base_config();
    cfg["smoothing_window"] = json!(1);
    cfg["models"] = json!(["lr", "a2c"]);
    let (_dir, out) = full_run(&cfg);
    let summary: Summary = read_json(&out.join("explain/summary.json"));
    assert_eq!(summary.models.len(), 3);
    for m in &summary.models {
        assert_eq!(m.mean_single, m.mean_multi, "{}", m.name);
        assert_eq!(m.n_single, m.n_multi);
    }
}

#[test]
fn stages_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["models"] = json!(["lr", "ppo"]);
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");

    ok(&run(&["ingest"], &path));
    let first = fs::read(out.join("ingest/panel.csv")).unwrap();
    ok(&run(&["ingest"], &path));
    assert_eq!(first, fs::read(out.join("ingest/panel.csv")).unwrap());

    ok(&run(&["all"], &path));
    let a = checksum_tree(&out).unwrap();
    ok(&run(&["train"], &path));
    ok(&run(&["backtest"], &path));
    ok(&run(&["explain"], &path));
    assert_eq!(a, checksum_tree(&out).unwrap());
}

#[test]
fn zero_steps_leave_the_initial_agent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["train_steps"] = json!(0);
    cfg["models"] = json!(["a2c"]);
    let path = write_config(dir.path(), &cfg);
    ok(&run(&["ingest"], &path));
    ok(&run(&["train"], &path));
    let ck: AgentCheckpoint = read_json(&dir.path().join("out/models/a2c.json"));
    assert_eq!(ck.steps, 0);
    let n = 6;
    let hp: Hyperparams = serde_json::from_value(cfg["agent"].clone()).unwrap();
    let fresh = AgentBundle::new(n * (n + 4), n, hp, 2).unwrap();
    assert_eq!(ck.policy, fresh.policy.to_checkpoint());
    assert_eq!(ck.value, fresh.value.to_checkpoint());
    let curve = fs::read_to_string(dir.path().join("out/curves/a2c.csv")).unwrap();
    assert_eq!(curve.trim(), "rollout,mean_reward");
}

#[test]
fn csv_source_reproduces_the_synthetic_run() {
    let (_a, out) = full_run(&json!({
        "schema_version": 1,
        "data": {"synthetic": {"n_assets": 6, "n_days": 240, "alpha": 0.02, "seed": 5}},
        "train": {"start": "2015-01-02", "end": "2015-07-31"},
        "trade": {"start": "2015-08-03", "end": "2015-12-31"},
        "models": ["lr"],
        "output_dir": "out"
    }));
    let dir = tempfile::tempdir().unwrap();
    fs::copy(out.join("ingest/panel.csv"), dir.path().join("prices.csv")).unwrap();
    let path = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "data": {"csv": "prices.csv"},
            "train": {"start": "2015-01-02", "end": "2015-07-31"},
            "trade": {"start": "2015-08-03", "end": "2015-12-31"},
            "models": ["lr"],
            "output_dir": "out"
        }),
    );
    ok(&run(&["all"], &path));
    let other = dir.path().join("out");
    for rel in ["ingest/features.csv", "backtest/metrics.json", "explain/summary.json", "explain/table.json"] {
        assert_eq!(fs::read(out.join(rel)).unwrap(), fs::read(other.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn benchmark_is_reported_as_a_column() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["models"] = json!(["lr"]);
    cfg["benchmark"] = json!("bench.csv");
    let path = write_config(dir.path(), &cfg);
    ok(&run(&["ingest"], &path));
    // Benchmark grows 0.1% per day over every ingested date.
    let dates = csv_dates(&dir.path().join("out/ingest/panel.csv"));
    let mut text = String::from("date,value\n");
    for (i, d) in dates.iter().enumerate() {
        text.push_str(&format!("{d},{}\n", 100.0 * 1.001f64.powi(i as i32)));
    }
    fs::write(dir.path().join("bench.csv"), text).unwrap();
    ok(&run(&["all"], &path));
    let table: MetricsTable = read_json(&dir.path().join("out/explain/table.json"));
    let col = table.columns.iter().position(|c| c == "benchmark").unwrap();
    let annual = table.values[0][col].as_f64().unwrap();
    assert!((annual - (1.001f64.powf(252.0) - 1.0)).abs() < 1e-9);
    assert_eq!(table.values[4][col].as_f64(), Some(0.0));
}

fn csv_dates(p: &Path) -> Vec<String> {
    let mut rdr = csv::Reader::from_path(p).unwrap();
    let col = rdr.headers().unwrap().iter().position(|h| h == "date").unwrap();
    let mut dates: Vec<String> = rdr.records().map(|r| r.unwrap()[col].to_string()).collect();
    dates.dedup();
    dates
}

#[test]
fn seed_and_out_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["models"] = json!(["rf"]);
    let path = write_config(dir.path(), &cfg);
    let alt = dir.path().join("alt");
    for (out, seed) in [("a", "2"), ("b", "9")] {
        let o = Command::new(BIN)
            .args(["all", "--config"])
            .arg(&path)
            .args(["--seed", seed, "--out"])
            .arg(alt.join(out))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        ok(&o);
    }
    assert!(!dir.path().join("out").exists());
    let a = fs::read(alt.join("a/models/rf.json")).unwrap();
    let b = fs::read(alt.join("b/models/rf.json")).unwrap();
    assert_ne!(a, b);

    // Explicit model list on the command line.
    let o = run(&["train", "--model", "lr,dt", "--out", alt.join("a").to_str().unwrap()], &path);
    ok(&o);
    assert!(alt.join("a/models/lr.json").is_file() && alt.join("a/models/dt.json").is_file());
}

#[test]
fn missing_data_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["data"] = json!({"csv": "nowhere.csv"});
    let path = write_config(dir.path(), &cfg);
    let o = run(&["ingest"], &path);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing file"), "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere.csv"));
}

#[test]
fn missing_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["ingest"], &dir.path().join("absent.json"));
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing file"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cases = Vec::new();
    let mut c = base_config();
    c.as_object_mut().unwrap().remove("schema_version");
    cases.push((c, "schema_version"));
    let mut c = base_config();
    c["schema_version"] = json!(7);
    cases.push((c, "schema_version"));
    let mut c = base_config();
    c["models"] = json!(["lr", "xgboost"]);
    cases.push((c, "xgboost"));
    let mut c = base_config();
    c["lambda"] = json!(-1.0);
    cases.push((c, "lambda"));
    let mut c = base_config();
    c["smoothing_window"] = json!(0);
    cases.push((c, "smoothing_window"));
    let mut c = base_config();
    c["trade"] = json!({"start": "2015-06-01", "end": "2015-12-31"});
    cases.push((c, "train range"));
    let mut c = base_config();
    c["colour"] = json!("blue");
    cases.push((c, "colour"));
    for (cfg, needle) in cases {
        let path = write_config(dir.path(), &cfg);
        let o = run(&["ingest"], &path);
        assert_eq!(o.status.code(), Some(2), "{needle}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{needle}: {}", stderr(&o));
    }

    fs::write(dir.path().join("config.json"), "{not json").unwrap();
    assert_eq!(run(&["ingest"], &dir.path().join("config.json")).status.code(), Some(2));

    let path = write_config(dir.path(), &base_config());
    let o = run(&["ingest", "--model", "lstm"], &path);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["models"] = json!(["lr"]);
    let path = write_config(dir.path(), &cfg);
    let o = run(&["train"], &path);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing file"));

    ok(&run(&["ingest"], &path));
    let o = run(&["backtest"], &path);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("lr.json"));
}

#[test]
fn tampered_artifacts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["models"] = json!(["lr"]);
    let path = write_config(dir.path(), &cfg);
    ok(&run(&["ingest"], &path));
    ok(&run(&["train"], &path));
    let model = dir.path().join("out/models/lr.json");
    let mut text = fs::read_to_string(&model).unwrap();
    text.push(' ');
    fs::write(&model, text).unwrap();
    let o = run(&["backtest"], &path);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("does not match the manifest"), "{}", stderr(&o));

    // Editing the panel invalidates every later stage.
    ok(&run(&["train"], &path));
    ok(&run(&["backtest"], &path));
    let panel = dir.path().join("out/ingest/panel.csv");
    let text = fs::read_to_string(&panel).unwrap().replacen(",1", ",2", 1);
    fs::write(&panel, text).unwrap();
    let o = run(&["explain"], &path);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("panel.csv"));
}

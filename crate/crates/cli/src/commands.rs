//! Subcommands: each stage reads the previous stage's files and records
//! what it writes in `manifest.json` under the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use hindsight_core::attribution::{Histogram, IgConfig, ZTestResult};
use hindsight_core::backtest::{metrics_from_values, Metrics, PERIODS_PER_YEAR};
use hindsight_core::features::FEATURE_NAMES;
use hindsight_core::hindsight::{smooth_reference, FeatureWeightSeries, SkippedSlot};
use hindsight_core::market_data::{load_panel, write_panel, PricePanel};
use hindsight_core::ml::RegressorModel;
use hindsight_core::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ModelId, RunConfig};
use crate::pipeline::{self, AgentCheckpoint, Attribution, Prepared, Trained, TrainedAgent};

pub const MANIFEST: &str = "manifest.json";
pub const PANEL_FILE: &str = "ingest/panel.csv";
pub const FEATURE_FILE: &str = "ingest/features.csv";
pub const METRICS_FILE: &str = "backtest/metrics.json";
pub const REGRESSOR_FORMAT: &str = "regressor";
pub const REGRESSOR_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory plus its manifest of `relative path -> sha256`.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> Result<BTreeMap<String, String>> {
        let p = self.path(MANIFEST);
        if !p.exists() {
            return Ok(BTreeMap::new());
        }
        Ok(serde_json::from_slice(&fs::read(p)?)?)
    }

    /// Write `bytes` to `rel`, creating parent directories, and note its hash.
    pub fn write(&self, rel: &str, bytes: &[u8], manifest: &mut BTreeMap<String, String>) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, bytes)?;
        manifest.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(
        &self,
        rel: &str,
        value: &T,
        manifest: &mut BTreeMap<String, String>,
    ) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes(), manifest)
    }

    /// Hash a file produced by a core writer and note it.
    pub fn record(&self, rel: &str, manifest: &mut BTreeMap<String, String>) -> Result<()> {
        let bytes = fs::read(self.path(rel))?;
        manifest.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn save_manifest(&self, manifest: &BTreeMap<String, String>) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        let mut text = serde_json::to_string_pretty(manifest)?;
        text.push('\n');
        fs::write(self.path(MANIFEST), text)?;
        Ok(())
    }

    /// Path of an artifact whose content still matches the manifest.
    pub fn verified(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
        let manifest = self.manifest()?;
        let expected = manifest.get(rel).ok_or_else(|| Error::StaleArtifact(p.clone()))?;
        if sha256_hex(&fs::read(&p)?) != *expected {
            return Err(Error::StaleArtifact(p));
        }
        Ok(p)
    }

    fn create_parent(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(p)
    }
}

fn model_file(id: ModelId) -> String {
    format!("models/{}.json", id.name())
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    let ws = Workspace::new(&cfg.output_dir);
    let panel = pipeline::load_source(cfg)?;
    let prep = pipeline::prepare(cfg, panel)?;
    let mut manifest = ws.manifest()?;
    write_panel(&prep.panel, &ws.create_parent(PANEL_FILE)?)?;
    ws.record(PANEL_FILE, &mut manifest)?;
    prep.features.write_csv(&prep.panel, &ws.create_parent(FEATURE_FILE)?)?;
    ws.record(FEATURE_FILE, &mut manifest)?;
    ws.save_manifest(&manifest)?;
    info!(
        "ingested {} assets x {} days; train slots {:?}, trade slots {:?}",
        prep.panel.n_assets(),
        prep.panel.n_days(),
        prep.train_slots,
        prep.trade_slots
    );
    Ok(())
}

pub fn load_prepared(cfg: &RunConfig, ws: &Workspace) -> Result<Prepared> {
    let panel = load_panel(&ws.verified(PANEL_FILE)?, None)?;
    pipeline::prepare(cfg, panel)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegressorDump {
    format: String,
    version: u32,
    model: RegressorModel,
}

pub fn cmd_train(cfg: &RunConfig, models: &[ModelId]) -> Result<()> {
    let ws = Workspace::new(&cfg.output_dir);
    let prep = load_prepared(cfg, &ws)?;
    let mut manifest = ws.manifest()?;
    for &id in models {
        match pipeline::train_model(cfg, &prep, id, cfg.seed)? {
            Trained::Drl { agent, curve } => {
                ws.write_json(&model_file(id), &agent.checkpoint, &mut manifest)?;
                let mut csv = String::from("rollout,mean_reward\n");
                for (i, r) in curve.iter().enumerate() {
                    csv.push_str(&format!("{},{r}\n", i + 1));
                }
                ws.write(&format!("curves/{}.csv", id.name()), csv.as_bytes(), &mut manifest)?;
            }
            Trained::Ml(model) => {
                let dump = RegressorDump {
                    format: REGRESSOR_FORMAT.into(),
                    version: REGRESSOR_VERSION,
                    model,
                };
                ws.write_json(&model_file(id), &dump, &mut manifest)?;
            }
        }
        info!("trained {}", id.name());
    }
    ws.save_manifest(&manifest)
}

pub fn load_model(ws: &Workspace, id: ModelId) -> Result<Trained> {
    let bytes = fs::read(ws.verified(&model_file(id))?)?;
    match id {
        ModelId::Drl(_) => {
            let ck: AgentCheckpoint = serde_json::from_slice(&bytes)?;
            Ok(Trained::Drl {
                agent: TrainedAgent::from_checkpoint(ck)?,
                curve: Vec::new(),
            })
        }
        ModelId::Ml(_) => {
            let dump: RegressorDump = serde_json::from_slice(&bytes)?;
            if dump.format != REGRESSOR_FORMAT || dump.version != REGRESSOR_VERSION {
                return Err(Error::Config(format!(
                    "unsupported model dump {} v{}",
                    dump.format, dump.version
                )));
            }
            Ok(Trained::Ml(dump.model))
        }
    }
}

/// Table rows in display order, keyed like the metrics record.
pub const TABLE_ROWS: [&str; 7] = [
    "annual_return",
    "annual_volatility",
    "sharpe_ratio",
    "calmar_ratio",
    "max_drawdown",
    "ave_corr_single",
    "ave_corr_multi",
];

/// Per-model performance table; `values[row][column]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<Value>>,
    /// Full metrics record per column, including warnings.
    pub metrics: BTreeMap<String, Metrics>,
}

fn number(x: f64) -> Value {
    if x.is_infinite() {
        Value::String(if x > 0.0 { "inf" } else { "-inf" }.into())
    } else {
        json!(x)
    }
}

fn metric_cells(m: &Metrics) -> Vec<Value> {
    vec![
        number(m.annual_return),
        number(m.annual_volatility),
        m.sharpe.map_or(Value::Null, number),
        number(m.calmar),
        number(m.max_drawdown),
        Value::Null,
        Value::Null,
    ]
}

impl MetricsTable {
    fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self {
            start,
            end,
            rows: TABLE_ROWS.iter().map(|s| s.to_string()).collect(),
            columns: Vec::new(),
            values: vec![Vec::new(); TABLE_ROWS.len()],
            metrics: BTreeMap::new(),
        }
    }

    fn push(&mut self, name: &str, m: &Metrics) {
        self.columns.push(name.to_string());
        for (row, cell) in self.values.iter_mut().zip(metric_cells(m)) {
            row.push(cell);
        }
        self.metrics.insert(name.to_string(), m.clone());
    }

    fn set_corr(&mut self, name: &str, single: Option<f64>, multi: Option<f64>) {
        let col = match self.columns.iter().position(|c| c == name) {
            Some(c) => c,
            None => {
                self.columns.push(name.to_string());
                self.values.iter_mut().for_each(|r| r.push(Value::Null));
                self.columns.len() - 1
            }
        };
        self.values[5][col] = single.map_or(Value::Null, number);
        self.values[6][col] = multi.map_or(Value::Null, number);
    }
}

/// `date,value` benchmark curve restricted to the trade range, starting the
/// day before the first trade slot.
fn benchmark_values(path: &Path, prep: &Prepared) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (dc, vc) = (col("date")?, col("value")?);
    let mut by_date = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |reason: String| Error::UnparsableRow { line, reason };
        let date = NaiveDate::parse_from_str(rec.get(dc).unwrap_or("").trim(), "%Y-%m-%d")
            .map_err(|e| bad(e.to_string()))?;
        let v: f64 = rec.get(vc).unwrap_or("").trim().parse().map_err(|e| bad(format!("{e}")))?;
        if !(v > 0.0) {
            return Err(bad(format!("non-positive value {v}")));
        }
        by_date.insert(date, v);
    }
    let days = (prep.trade_slots.start() - 1)..=*prep.trade_slots.end();
    days.map(|d| {
        let date = prep.panel.dates[d];
        by_date.get(&date).copied().ok_or_else(|| Error::UnparsableRow {
            line: 0,
            reason: format!("benchmark has no value for {date}"),
        })
    })
    .collect()
}

fn load_models(ws: &Workspace, models: &[ModelId]) -> Result<Vec<Trained>> {
    models.iter().map(|id| load_model(ws, *id)).collect()
}

fn trade_period(prep: &Prepared) -> (NaiveDate, NaiveDate) {
    (
        prep.panel.dates[*prep.trade_slots.start()],
        prep.panel.dates[*prep.trade_slots.end()],
    )
}

pub fn cmd_backtest(cfg: &RunConfig, models: &[ModelId]) -> Result<()> {
    let ws = Workspace::new(&cfg.output_dir);
    let prep = load_prepared(cfg, &ws)?;
    let trained = load_models(&ws, models)?;
    let runs = pipeline::backtest_all(&prep, &trained)?;
    let mut manifest = ws.manifest()?;
    let (start, end) = trade_period(&prep);
    let mut table = MetricsTable::new(start, end);
    for run in &runs {
        let rel = format!("backtest/{}.csv", run.result.name);
        run.result.write_csv(&ws.create_parent(&rel)?)?;
        ws.record(&rel, &mut manifest)?;
        table.push(&run.result.name, &run.metrics);
    }
    if let Some(path) = &cfg.benchmark {
        let values = benchmark_values(path, &prep)?;
        table.push("benchmark", &metrics_from_values(&values, PERIODS_PER_YEAR, 0.0)?);
    }
    ws.write_json(METRICS_FILE, &table, &mut manifest)?;
    ws.save_manifest(&manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub mean_single: Option<f64>,
    pub mean_multi: Option<f64>,
    pub n_single: usize,
    pub n_multi: usize,
    pub undefined_single: usize,
    pub undefined_multi: usize,
    pub z_single: Option<ZTestResult>,
    pub z_multi: Option<ZTestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub smoothing_window: usize,
    pub ig_steps: usize,
    pub models: Vec<ModelSummary>,
}

impl Summary {
    pub fn model(&self, name: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.name == name)
    }
}

pub fn summarize(a: &Attribution) -> ModelSummary {
    ModelSummary {
        name: a.name.clone(),
        mean_single: a.single.mean,
        mean_multi: a.multi.mean,
        n_single: a.single.n_defined,
        n_multi: a.multi.n_defined,
        undefined_single: a.single.n_undefined,
        undefined_multi: a.multi.n_undefined,
        z_single: a.z_single.clone(),
        z_multi: a.z_multi.clone(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SkipLog {
    name: String,
    skipped: Vec<SkippedEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SkippedEntry {
    date: NaiveDate,
    reason: String,
}

fn skip_log(name: &str, skipped: &[SkippedSlot], panel: &PricePanel) -> SkipLog {
    SkipLog {
        name: name.to_string(),
        skipped: skipped
            .iter()
            .map(|s| SkippedEntry {
                date: panel.dates[s.slot],
                reason: s.reason.clone(),
            })
            .collect(),
    }
}

fn correlations_csv(a: &Attribution, panel: &PricePanel) -> String {
    let multi: BTreeMap<usize, Option<f64>> = a
        .multi
        .series
        .slots
        .iter()
        .copied()
        .zip(a.multi.series.rho.iter().copied())
        .collect();
    let cell = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    let mut out = String::from("date,rho_single,rho_multi\n");
    for (slot, rho) in a.single.series.slots.iter().zip(&a.single.series.rho) {
        out.push_str(&format!(
            "{},{},{}\n",
            panel.dates[*slot].format("%Y-%m-%d"),
            cell(*rho),
            cell(multi.get(slot).copied().flatten())
        ));
    }
    out
}

fn weight_prefix(name: &str) -> &'static str {
    match name {
        "a2c" | "ppo" => "m",
        "hindsight" => "beta",
        _ => "b",
    }
}

pub fn cmd_explain(cfg: &RunConfig, models: &[ModelId]) -> Result<()> {
    let ws = Workspace::new(&cfg.output_dir);
    let prep = load_prepared(cfg, &ws)?;
    let trained = load_models(&ws, models)?;
    let ig = IgConfig {
        path_steps: cfg.ig_steps,
    };
    let (beta, skipped, attributions) =
        pipeline::explain_all(&prep, &trained, &ig, cfg.smoothing_window, cfg.histogram_bins)?;
    let mut manifest = ws.manifest()?;
    let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();

    let write_series = |rel: &str, s: &FeatureWeightSeries, prefix: &str, m: &mut BTreeMap<String, String>| {
        s.write_csv(&ws.create_parent(rel)?, &prep.panel, prefix, &names)?;
        ws.record(rel, m)
    };
    write_series("explain/reference.csv", &beta, "beta", &mut manifest)?;
    let smoothed = smooth_reference(&beta, cfg.smoothing_window)?;
    write_series("explain/reference_smoothed.csv", &smoothed, "beta_w", &mut manifest)?;

    let mut histograms: BTreeMap<String, BTreeMap<&str, Histogram>> = BTreeMap::new();
    let mut skips = vec![skip_log("reference", &skipped, &prep.panel)];
    for a in &attributions {
        write_series(
            &format!("explain/weights/{}.csv", a.name),
            &a.weights,
            weight_prefix(&a.name),
            &mut manifest,
        )?;
        ws.write(
            &format!("explain/correlations/{}.csv", a.name),
            correlations_csv(a, &prep.panel).as_bytes(),
            &mut manifest,
        )?;
        histograms.insert(
            a.name.clone(),
            BTreeMap::from([("single", a.hist_single.clone()), ("multi", a.hist_multi.clone())]),
        );
        skips.push(skip_log(&a.name, &a.skipped, &prep.panel));
    }
    let summary = Summary {
        smoothing_window: cfg.smoothing_window,
        ig_steps: cfg.ig_steps,
        models: attributions.iter().map(summarize).collect(),
    };
    ws.write_json("explain/summary.json", &summary, &mut manifest)?;
    ws.write_json("explain/histograms.json", &histograms, &mut manifest)?;
    ws.write_json("explain/skipped.json", &skips, &mut manifest)?;

    // Performance rows come from the backtest stage when it has run.
    let mut table = match ws.verified(METRICS_FILE) {
        Ok(p) => serde_json::from_slice(&fs::read(p)?)?,
        Err(Error::MissingFile(_)) => {
            let (start, end) = trade_period(&prep);
            MetricsTable::new(start, end)
        }
        Err(e) => return Err(e),
    };
    for m in &summary.models {
        table.set_corr(&m.name, m.mean_single, m.mean_multi);
    }
    ws.write_json("explain/table.json", &table, &mut manifest)?;
    ws.save_manifest(&manifest)
}

/// All four stages in order.
pub fn cmd_all(cfg: &RunConfig, models: &[ModelId]) -> Result<()> {
    cmd_ingest(cfg)?;
    cmd_train(cfg, models)?;
    cmd_backtest(cfg, models)?;
    cmd_explain(cfg, models)
}

/// Hashes of every file under the output directory, sorted by path.
pub fn checksum_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(&p, root, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_hex(&fs::read(&p)?));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

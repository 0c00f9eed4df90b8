//! Run configuration loaded from JSON.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use hindsight_core::features::IndicatorParams;
use hindsight_core::ml::{MlHyperparams, RegressorKind};
use hindsight_core::rl::{Algo, Hyperparams};
use hindsight_core::synthetic::SyntheticConfig;
use hindsight_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Long-format OHLCV file.
    Csv(PathBuf),
    /// Generated market; written to the output directory on ingest.
    Synthetic(SyntheticConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn contains(&self, d: NaiveDate) -> bool {
        d >= self.start && d <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelId {
    Drl(Algo),
    Ml(RegressorKind),
}

impl ModelId {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "a2c" => Some(ModelId::Drl(Algo::A2c)),
            "ppo" => Some(ModelId::Drl(Algo::Ppo)),
            other => RegressorKind::from_name(other).map(ModelId::Ml),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelId::Drl(a) => a.name(),
            ModelId::Ml(k) => k.name(),
        }
    }

    pub fn all() -> Vec<ModelId> {
        let mut v = vec![ModelId::Drl(Algo::Ppo), ModelId::Drl(Algo::A2c)];
        v.extend(RegressorKind::ALL.iter().map(|k| ModelId::Ml(*k)));
        v
    }
}

fn default_lambda() -> f64 {
    0.5
}
fn default_w() -> usize {
    20
}
fn default_cov_window() -> usize {
    60
}
fn default_steps() -> usize {
    20_000
}
fn default_models() -> Vec<String> {
    ModelId::all().iter().map(|m| m.name().to_string()).collect()
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_ig_steps() -> usize {
    64
}
fn default_bins() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataSource,
    #[serde(default)]
    pub tickers: Option<Vec<String>>,
    pub train: DateRange,
    pub trade: DateRange,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Forward smoothing window of the reference weights.
    #[serde(default = "default_w")]
    pub smoothing_window: usize,
    #[serde(default = "default_cov_window")]
    pub cov_window: usize,
    #[serde(default)]
    pub indicators: IndicatorParams,
    #[serde(default)]
    pub agent: Hyperparams,
    #[serde(default = "default_steps")]
    pub train_steps: usize,
    #[serde(default)]
    pub ml: MlHyperparams,
    #[serde(default = "default_models")]
    pub models: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Optional `date,value` series reported next to the strategies.
    #[serde(default)]
    pub benchmark: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        match raw.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "unsupported schema_version {v}, expected {SCHEMA_VERSION}"
                )))
            }
            None => return Err(Error::Config("missing schema_version".into())),
        }
        let mut cfg: RunConfig =
            serde_json::from_value(raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Relative paths are taken relative to the config file.
        if let (DataSource::Csv(p), Some(dir)) = (&mut cfg.data, path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if let Some(dir) = path.parent() {
            if cfg.output_dir.is_relative() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
        }
        if let (Some(b), Some(dir)) = (&mut cfg.benchmark, path.parent()) {
            if b.is_relative() {
                *b = dir.join(&*b);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.smoothing_window == 0 {
            return bad("smoothing_window must be >= 1".into());
        }
        if self.cov_window < 2 {
            return bad("cov_window must be >= 2".into());
        }
        if self.ig_steps == 0 {
            return bad("ig_steps must be >= 1".into());
        }
        if self.train.start > self.train.end || self.trade.start > self.trade.end {
            return bad("date range with start after end".into());
        }
        if self.train.end >= self.trade.start {
            return bad(format!(
                "train range must end before the trade range starts ({} >= {})",
                self.train.end, self.trade.start
            ));
        }
        let p = &self.indicators;
        if p.macd_fast == 0 || p.macd_fast >= p.macd_slow || p.rsi_period == 0 || p.cci_period < 2 || p.adx_period == 0
        {
            return bad("invalid indicator periods".into());
        }
        self.model_ids()?;
        Ok(())
    }

    pub fn model_ids(&self) -> Result<Vec<ModelId>> {
        self.models
            .iter()
            .map(|m| ModelId::parse(m).ok_or_else(|| Error::Config(format!("unknown model `{m}`"))))
            .collect()
    }
}

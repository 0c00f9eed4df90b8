//! Walk-forward backtests and annualized performance metrics.

use std::fs::File;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::features::{build_state, slot_features, FeatureScaler, FeatureTensor};
use crate::market_data::{price_relatives, realized_covariance, sample_covariance, PricePanel};
use crate::mean_variance::{check_simplex, hindsight_weights, SolverOptions, SIMPLEX_TOL};
use crate::ml::{ml_strategy_weights, RegressorModel};
use crate::nn::DenseNet;

pub const PERIODS_PER_YEAR: f64 = 252.0;

/// Read-only market inputs shared by every strategy.
#[derive(Debug, Clone, Copy)]
pub struct MarketContext<'a> {
    pub panel: &'a PricePanel,
    pub features: &'a FeatureTensor,
    pub scaler: &'a FeatureScaler,
    pub window: usize,
    pub lambda: f64,
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Drl,
    Ml,
    EqualWeight,
    Hindsight,
}

/// Allocation rule evaluated once per slot. Apart from the hindsight
/// strategy, implementations must only read data up to day `t-1`.
pub trait Strategy {
    fn name(&self) -> &str;
    fn kind(&self) -> StrategyKind;
    fn uses_hindsight(&self) -> bool {
        false
    }
    fn weights(&self, ctx: &MarketContext<'_>, t: usize) -> Result<Vec<f64>>;
}

pub struct EqualWeight;

impl Strategy for EqualWeight {
    fn name(&self) -> &str {
        "equal_weight"
    }
    fn kind(&self) -> StrategyKind {
        StrategyKind::EqualWeight
    }
    fn weights(&self, ctx: &MarketContext<'_>, _t: usize) -> Result<Vec<f64>> {
        let n = ctx.panel.n_assets();
        Ok(vec![1.0 / n as f64; n])
    }
}

/// Mean-variance weights from the slot's realized relatives and covariance.
/// Looks ahead by construction.
pub struct HindsightStrategy;

impl Strategy for HindsightStrategy {
    fn name(&self) -> &str {
        "hindsight"
    }
    fn kind(&self) -> StrategyKind {
        StrategyKind::Hindsight
    }
    fn uses_hindsight(&self) -> bool {
        true
    }
    fn weights(&self, ctx: &MarketContext<'_>, t: usize) -> Result<Vec<f64>> {
        let y = price_relatives(ctx.panel, t)?;
        let cov = realized_covariance(ctx.panel, t, ctx.window)?;
        Ok(hindsight_weights(&y, &cov, ctx.lambda, &ctx.solver)?.values)
    }
}

pub struct MlStrategy {
    pub label: String,
    pub model: RegressorModel,
}

impl Strategy for MlStrategy {
    fn name(&self) -> &str {
        &self.label
    }
    fn kind(&self) -> StrategyKind {
        StrategyKind::Ml
    }
    fn weights(&self, ctx: &MarketContext<'_>, t: usize) -> Result<Vec<f64>> {
        let f = slot_features(ctx.features, ctx.scaler, t)?;
        let cov = sample_covariance(ctx.panel, t, ctx.window)?;
        Ok(ml_strategy_weights(&self.model, &f, &cov, ctx.lambda, &ctx.solver)?.values)
    }
}

/// Deterministic (mean) action of a trained policy network.
pub struct DrlStrategy {
    pub label: String,
    pub policy: DenseNet,
}

impl Strategy for DrlStrategy {
    fn name(&self) -> &str {
        &self.label
    }
    fn kind(&self) -> StrategyKind {
        StrategyKind::Drl
    }
    fn weights(&self, ctx: &MarketContext<'_>, t: usize) -> Result<Vec<f64>> {
        let s = build_state(ctx.panel, ctx.features, ctx.scaler, t, ctx.window)?;
        self.policy.predict(&s.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub name: String,
    pub kind: StrategyKind,
    pub uses_hindsight: bool,
    pub slots: Vec<usize>,
    pub dates: Vec<NaiveDate>,
    pub weights: Vec<Vec<f64>>,
    /// `w(t)'y(t)` per slot.
    pub growth: Vec<f64>,
    /// `r(t) = ln(w(t)'y(t))`.
    pub log_returns: Vec<f64>,
    /// `v(t)/v(0)`, starting with 1 before the first slot.
    pub values: Vec<f64>,
}

impl BacktestResult {
    /// `date,return,value` with the slot log-return and the value relative to start.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        writeln!(out, "date,return,value")?;
        for (i, d) in self.dates.iter().enumerate() {
            writeln!(
                out,
                "{},{},{}",
                d.format("%Y-%m-%d"),
                self.log_returns[i],
                self.values[i + 1]
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn final_value(&self) -> f64 {
        *self.values.last().expect("starts with 1")
    }
}

pub fn run(
    strategy: &dyn Strategy,
    ctx: &MarketContext<'_>,
    slots: RangeInclusive<usize>,
) -> Result<BacktestResult> {
    let mut res = BacktestResult {
        name: strategy.name().to_string(),
        kind: strategy.kind(),
        uses_hindsight: strategy.uses_hindsight(),
        slots: Vec::new(),
        dates: Vec::new(),
        weights: Vec::new(),
        growth: Vec::new(),
        log_returns: Vec::new(),
        values: vec![1.0],
    };
    let mut value = 1.0;
    for t in slots {
        let w = strategy.weights(ctx, t).map_err(|e| e.at_slot(t))?;
        check_simplex(&w, SIMPLEX_TOL).map_err(|e| e.at_slot(t))?;
        let y = price_relatives(ctx.panel, t).map_err(|e| e.at_slot(t))?;
        let g: f64 = w.iter().zip(&y.values).map(|(a, b)| a * b).sum();
        value *= g;
        res.slots.push(t);
        res.dates.push(ctx.panel.dates[t]);
        res.weights.push(w);
        res.growth.push(g);
        res.log_returns.push(g.ln());
        res.values.push(value);
    }
    Ok(res)
}

fn inf_as_string<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

fn inf_from_string<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(x) => Ok(x),
        Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Raw::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
        Raw::Str(s) => Err(serde::de::Error::custom(format!("bad number `{s}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricWarning {
    /// Volatility is zero, so Sharpe is undefined.
    ZeroVolatility,
    /// Drawdown is zero, so Calmar is reported as +inf.
    ZeroDrawdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_slots: usize,
    pub cumulative_return: f64,
    pub annual_return: f64,
    pub annual_volatility: f64,
    pub sharpe: Option<f64>,
    #[serde(serialize_with = "inf_as_string", deserialize_with = "inf_from_string")]
    pub calmar: f64,
    pub max_drawdown: f64,
    pub warnings: Vec<MetricWarning>,
}

/// Metrics of a value curve `v(0), ..., v(T)`.
pub fn metrics_from_values(values: &[f64], periods_per_year: f64, risk_free: f64) -> Result<Metrics> {
    if values.len() < 3 {
        return Err(Error::TooFewSamples(values.len().saturating_sub(1)));
    }
    let t = (values.len() - 1) as f64;
    let total = values[values.len() - 1] / values[0];
    let annual_return = total.powf(periods_per_year / t) - 1.0;
    let simple: Vec<f64> = values.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let mean = simple.iter().sum::<f64>() / t;
    let std = (simple.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (t - 1.0)).sqrt();
    let annual_volatility = std * periods_per_year.sqrt();

    let mut warnings = Vec::new();
    let sharpe = if std > 1e-12 * mean.abs().max(1.0) {
        Some((mean * periods_per_year - risk_free) / annual_volatility)
    } else {
        warnings.push(MetricWarning::ZeroVolatility);
        None
    };

    let mut peak = f64::NEG_INFINITY;
    let mut max_drawdown = 0.0f64;
    for v in values {
        peak = peak.max(*v);
        max_drawdown = max_drawdown.min(v / peak - 1.0);
    }
    let calmar = if max_drawdown < 0.0 {
        annual_return / max_drawdown.abs()
    } else {
        warnings.push(MetricWarning::ZeroDrawdown);
        f64::INFINITY
    };
    Ok(Metrics {
        n_slots: values.len() - 1,
        cumulative_return: total - 1.0,
        annual_return,
        annual_volatility,
        sharpe,
        calmar,
        max_drawdown,
        warnings,
    })
}

pub fn metrics(result: &BacktestResult, periods_per_year: f64, risk_free: f64) -> Result<Metrics> {
    metrics_from_values(&result.values, periods_per_year, risk_free)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drawdown_fixture() {
        let m = metrics_from_values(&[1.0, 1.1, 1.0, 1.2, 0.9], 252.0, 0.0).unwrap();
        assert!((m.max_drawdown - (0.9 / 1.2 - 1.0)).abs() < 1e-15);
        assert!((m.max_drawdown + 0.25).abs() < 1e-12);
    }

    #[test]
    fn rising_curve_has_no_drawdown() {
        let m = metrics_from_values(&[1.0, 1.01, 1.05, 1.06], 252.0, 0.0).unwrap();
        assert_eq!(m.max_drawdown, 0.0);
        assert!(m.calmar.is_infinite());
        assert!(m.warnings.contains(&MetricWarning::ZeroDrawdown));
    }

    #[test]
    fn constant_growth_is_zero_volatility() {
        let values: Vec<f64> = (0..=252).map(|k| 1.001f64.powi(k)).collect();
        let m = metrics_from_values(&values, 252.0, 0.0).unwrap();
        assert!((m.annual_return - (1.001f64.powi(252) - 1.0)).abs() < 1e-12);
        assert!((m.annual_return - 0.2863).abs() < 5e-4);
        assert_eq!(m.sharpe, None);
        assert!(m.warnings.contains(&MetricWarning::ZeroVolatility));
    }

    #[test]
    fn calmar_sentinel_serializes() {
        let m = metrics_from_values(&[1.0, 1.01, 1.05], 252.0, 0.0).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"calmar\":\"inf\""));
        let back: Metrics = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn too_short() {
        assert!(metrics_from_values(&[1.0, 1.1], 252.0, 0.0).is_err());
    }
}

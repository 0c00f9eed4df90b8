//! In-memory pipeline stages. The commands module wraps these with file I/O.

use std::ops::RangeInclusive;

use hindsight_core::attribution::{
    drl_feature_weights, histogram, prediction_power, upper_tail_z, Histogram, IgConfig, PowerMode,
    PredictionPower, ZTestResult,
};
use hindsight_core::backtest::{
    self, BacktestResult, DrlStrategy, EqualWeight, HindsightStrategy, MarketContext, Metrics, MlStrategy,
    Strategy, PERIODS_PER_YEAR,
};
use hindsight_core::features::{build_state, slot_features, FeatureScaler, FeatureTensor};
use hindsight_core::hindsight::{reference_pipeline, FeatureWeightSeries, QVector, SkippedSlot};
use hindsight_core::market_data::{load_panel, price_relatives, sample_covariance, PricePanel};
use hindsight_core::mean_variance::SolverOptions;
use hindsight_core::ml::{self, ml_feature_weights, ml_strategy_weights, training_samples, RegressorModel};
use hindsight_core::nn::{DenseNet, NetCheckpoint};
use hindsight_core::rl::{self, Algo, Hyperparams, PortfolioEnv};
use hindsight_core::synthetic;
use hindsight_core::{Error, Result};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, DateRange, ModelId, RunConfig};

pub const AGENT_FORMAT: &str = "agent";
pub const AGENT_VERSION: u32 = 1;

pub fn load_source(cfg: &RunConfig) -> Result<PricePanel> {
    match &cfg.data {
        DataSource::Csv(path) => load_panel(path, cfg.tickers.as_deref()),
        DataSource::Synthetic(s) => Ok(synthetic::generate(s)?.panel),
    }
}

/// Panel, features and the slot ranges of one run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub panel: PricePanel,
    pub features: FeatureTensor,
    pub scaler: FeatureScaler,
    pub train_slots: RangeInclusive<usize>,
    pub trade_slots: RangeInclusive<usize>,
    pub cov_window: usize,
    pub lambda: f64,
    pub solver: SolverOptions,
}

impl Prepared {
    pub fn context(&self) -> MarketContext<'_> {
        MarketContext {
            panel: &self.panel,
            features: &self.features,
            scaler: &self.scaler,
            window: self.cov_window,
            lambda: self.lambda,
            solver: self.solver,
        }
    }
}

/// Slots whose end date falls in `range`, starting no earlier than `first`.
fn slots_in(panel: &PricePanel, range: &DateRange, first: usize) -> Option<RangeInclusive<usize>> {
    let inside: Vec<usize> = (first..=panel.n_slots())
        .filter(|&t| range.contains(panel.dates[t]))
        .collect();
    Some(*inside.first()?..=*inside.last()?)
}

pub fn prepare(cfg: &RunConfig, panel: PricePanel) -> Result<Prepared> {
    let features = FeatureTensor::compute(&panel, &cfg.indicators)?;
    let feature_ready = features.valid_from.iter().copied().max().unwrap_or(0) + 1;
    let first = feature_ready.max(cfg.cov_window + 1);
    let train_slots = slots_in(&panel, &cfg.train, first).ok_or_else(|| {
        Error::Config(format!(
            "train range {}..{} has no slot with full feature and covariance history",
            cfg.train.start, cfg.train.end
        ))
    })?;
    let trade_slots = slots_in(&panel, &cfg.trade, 1)
        .ok_or_else(|| Error::Config(format!("trade range {}..{} has no slots", cfg.trade.start, cfg.trade.end)))?;
    if *trade_slots.start() < first {
        return Err(Error::InsufficientHistory {
            slot: *trade_slots.start(),
            needed: first,
            available: *trade_slots.start(),
        });
    }
    if panel.dates[*train_slots.start()] > cfg.train.start {
        debug!(
            "train range starts at {} after indicator and covariance warm-up",
            panel.dates[*train_slots.start()]
        );
    }
    let scaler = FeatureScaler::fit(&features, train_slots.start() - 1, train_slots.end() - 1);
    Ok(Prepared {
        panel,
        features,
        scaler,
        train_slots,
        trade_slots,
        cov_window: cfg.cov_window,
        lambda: cfg.lambda,
        solver: SolverOptions::default(),
    })
}

/// Inference checkpoint of a trained agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub format: String,
    pub version: u32,
    pub algo: Algo,
    pub seed: u64,
    pub steps: usize,
    pub hyperparams: Hyperparams,
    pub policy: NetCheckpoint,
    pub value: NetCheckpoint,
}

#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub algo: Algo,
    pub policy: DenseNet,
    pub value: DenseNet,
    pub checkpoint: AgentCheckpoint,
}

impl TrainedAgent {
    pub fn from_checkpoint(ck: AgentCheckpoint) -> Result<Self> {
        if ck.format != AGENT_FORMAT || ck.version != AGENT_VERSION {
            return Err(Error::Config(format!(
                "unsupported agent checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(Self {
            algo: ck.algo,
            policy: DenseNet::from_checkpoint(&ck.policy)?,
            value: DenseNet::from_checkpoint(&ck.value)?,
            checkpoint: ck,
        })
    }
}

#[derive(Debug, Clone)]
pub enum Trained {
    Drl { agent: TrainedAgent, curve: Vec<f64> },
    Ml(RegressorModel),
}

impl Trained {
    pub fn name(&self) -> &'static str {
        match self {
            Trained::Drl { agent, .. } => agent.algo.name(),
            Trained::Ml(m) => m.kind.name(),
        }
    }
}

pub fn train_model(cfg: &RunConfig, prep: &Prepared, id: ModelId, seed: u64) -> Result<Trained> {
    let (t0, t1) = (*prep.train_slots.start(), *prep.train_slots.end());
    match id {
        ModelId::Drl(algo) => {
            let mut env = PortfolioEnv::new(&prep.panel, &prep.features, &prep.scaler, prep.cov_window, t0, t1)?;
            info!("training {} for {} steps on slots {t0}..={t1}", algo.name(), cfg.train_steps);
            let out = rl::train(&mut env, algo, &cfg.agent, cfg.train_steps, seed)?;
            let checkpoint = AgentCheckpoint {
                format: AGENT_FORMAT.into(),
                version: AGENT_VERSION,
                algo,
                seed,
                steps: cfg.train_steps,
                hyperparams: cfg.agent.clone(),
                policy: out.bundle.policy.to_checkpoint(),
                value: out.bundle.value.to_checkpoint(),
            };
            Ok(Trained::Drl {
                agent: TrainedAgent::from_checkpoint(checkpoint)?,
                curve: out.curve,
            })
        }
        ModelId::Ml(kind) => {
            let (x, y) = training_samples(&prep.panel, &prep.features, &prep.scaler, t0..=t1)?;
            info!("fitting {} on {} samples", kind.name(), x.len());
            Ok(Trained::Ml(ml::fit(kind, &x, &y, &cfg.ml, seed)?))
        }
    }
}

pub fn strategy_for(model: &Trained) -> Box<dyn Strategy> {
    match model {
        Trained::Drl { agent, .. } => Box::new(DrlStrategy {
            label: agent.algo.name().to_string(),
            policy: agent.policy.clone(),
        }),
        Trained::Ml(m) => Box::new(MlStrategy {
            label: m.kind.name().to_string(),
            model: m.clone(),
        }),
    }
}

#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub result: BacktestResult,
    pub metrics: Metrics,
}

/// Backtests of every model plus equal weight and the hindsight strategy.
pub fn backtest_all(prep: &Prepared, models: &[Trained]) -> Result<Vec<StrategyRun>> {
    let mut strategies: Vec<Box<dyn Strategy>> = models.iter().map(strategy_for).collect();
    strategies.push(Box::new(EqualWeight));
    strategies.push(Box::new(HindsightStrategy));
    let ctx = prep.context();
    strategies
        .iter()
        .map(|s| {
            let result = backtest::run(s.as_ref(), &ctx, prep.trade_slots.clone())?;
            let metrics = backtest::metrics(&result, PERIODS_PER_YEAR, 0.0)?;
            debug!("{}: final value {}", result.name, result.final_value());
            Ok(StrategyRun { result, metrics })
        })
        .collect()
}

/// Reference weights `beta(t)` over the trade range.
pub fn reference(prep: &Prepared) -> (FeatureWeightSeries, Vec<SkippedSlot>) {
    reference_pipeline(
        &prep.panel,
        &prep.features,
        &prep.scaler,
        prep.trade_slots.clone(),
        prep.lambda,
        prep.cov_window,
        &prep.solver,
    )
}

/// `M(t)` of the agent's critic over the trade range.
pub fn drl_weights(prep: &Prepared, agent: &TrainedAgent, cfg: &IgConfig) -> (FeatureWeightSeries, Vec<SkippedSlot>) {
    let mut out = FeatureWeightSeries::default();
    let mut skipped = Vec::new();
    for t in prep.trade_slots.clone() {
        let m = build_state(&prep.panel, &prep.features, &prep.scaler, t, prep.cov_window)
            .and_then(|s| drl_feature_weights(&agent.value, &s, cfg));
        match m {
            Ok(m) => out.push(t, m),
            Err(e) => skipped.push(SkippedSlot {
                slot: t,
                reason: e.to_string(),
            }),
        }
    }
    (out, skipped)
}

/// `b(t)` of an ML strategy over the trade range.
pub fn ml_weights(prep: &Prepared, model: &RegressorModel) -> (FeatureWeightSeries, Vec<SkippedSlot>) {
    let mut out = FeatureWeightSeries::default();
    let mut skipped = Vec::new();
    for t in prep.trade_slots.clone() {
        let b = (|| {
            let f = slot_features(&prep.features, &prep.scaler, t)?;
            let cov = sample_covariance(&prep.panel, t, prep.cov_window)?;
            let w = ml_strategy_weights(model, &f, &cov, prep.lambda, &prep.solver)?;
            let y = price_relatives(&prep.panel, t)?;
            ml_feature_weights(&QVector::new(t, &w.values, &y.values), &f)
        })();
        match b {
            Ok(b) => out.push(t, b),
            Err(e) => skipped.push(SkippedSlot {
                slot: t,
                reason: e.to_string(),
            }),
        }
    }
    (out, skipped)
}

#[derive(Debug, Clone)]
pub struct Attribution {
    pub name: String,
    pub weights: FeatureWeightSeries,
    pub skipped: Vec<SkippedSlot>,
    pub single: PredictionPower,
    pub multi: PredictionPower,
    pub z_single: Option<ZTestResult>,
    pub z_multi: Option<ZTestResult>,
    pub hist_single: Histogram,
    pub hist_multi: Histogram,
}

pub fn attribute(
    name: &str,
    weights: FeatureWeightSeries,
    skipped: Vec<SkippedSlot>,
    reference: &FeatureWeightSeries,
    w: usize,
    bins: usize,
) -> Result<Attribution> {
    let single = prediction_power(&weights, reference, PowerMode::Single)?;
    let multi = prediction_power(&weights, reference, PowerMode::Multi(w))?;
    Ok(Attribution {
        name: name.to_string(),
        z_single: upper_tail_z(&single.series.defined()).ok(),
        z_multi: upper_tail_z(&multi.series.defined()).ok(),
        hist_single: histogram(&single.series.rho, bins),
        hist_multi: histogram(&multi.series.rho, bins),
        weights,
        skipped,
        single,
        multi,
    })
}

/// Feature weights of every model plus the hindsight model itself.
pub fn explain_all(
    prep: &Prepared,
    models: &[Trained],
    ig: &IgConfig,
    w: usize,
    bins: usize,
) -> Result<(FeatureWeightSeries, Vec<SkippedSlot>, Vec<Attribution>)> {
    let (beta, skipped) = reference(prep);
    if beta.is_empty() {
        if let Some(s) = skipped.first() {
            warn!("reference undefined on every trade slot (first at {}: {})", prep.panel.dates[s.slot], s.reason);
        }
        return Err(Error::NoOverlap);
    }
    let mut out = Vec::with_capacity(models.len() + 1);
    for m in models {
        let (series, sk) = match m {
            Trained::Drl { agent, .. } => drl_weights(prep, agent, ig),
            Trained::Ml(model) => ml_weights(prep, model),
        };
        out.push(attribute(m.name(), series, sk, &beta, w, bins)?);
    }
    out.push(attribute("hindsight", beta.clone(), Vec::new(), &beta, w, bins)?);
    Ok((beta, skipped, out))
}

//! Synthetic OHLCV markets with a planted feature alpha.
//!
//! Each day's log price relative of asset `i` is
//! `market(t) + alpha * (0.5 - RSI_i(t-1) / 100) + noise_i(t)`, where the RSI
//! is computed from the closes generated so far with the same Wilder recursion
//! as [`crate::features::rsi`]. The RSI therefore predicts the next relative
//! up to the noise, and the coefficient is constant over the whole sample.

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::market_data::PricePanel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_assets: usize,
    pub n_days: usize,
    pub alpha: f64,
    pub noise_sigma: f64,
    pub market_sigma: f64,
    pub rsi_period: usize,
    pub start: NaiveDate,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_assets: 10,
            n_days: 600,
            alpha: 0.02,
            noise_sigma: 0.01,
            market_sigma: 0.005,
            rsi_period: 14,
            start: NaiveDate::from_ymd_opt(2015, 1, 2).expect("valid date"),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticMarket {
    pub panel: PricePanel,
    /// Planted signal `0.5 - RSI/100` by `[asset][day]`; 0 before the RSI is defined.
    pub signal: Vec<Vec<f64>>,
}

/// Wilder RSI updated one close at a time, mirroring the batch version.
#[derive(Debug, Clone)]
struct RunningRsi {
    period: usize,
    seen: usize,
    last: f64,
    gain: f64,
    loss: f64,
}

impl RunningRsi {
    fn new(period: usize, first: f64) -> Self {
        Self {
            period,
            seen: 1,
            last: first,
            gain: 0.0,
            loss: 0.0,
        }
    }

    fn push(&mut self, close: f64) -> Option<f64> {
        let d = close - self.last;
        self.last = close;
        let p = self.period as f64;
        let (g, l) = (d.max(0.0), (-d).max(0.0));
        if self.seen <= self.period {
            self.gain += g;
            self.loss += l;
            self.seen += 1;
            if self.seen <= self.period {
                return None;
            }
            self.gain /= p;
            self.loss /= p;
        } else {
            self.gain = (self.gain * (p - 1.0) + g) / p;
            self.loss = (self.loss * (p - 1.0) + l) / p;
        }
        Some(if self.loss == 0.0 {
            100.0
        } else {
            100.0 - 100.0 / (1.0 + self.gain / self.loss)
        })
    }
}

/// Consecutive weekdays from `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticMarket> {
    let n = cfg.n_assets;
    let days = cfg.n_days;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
    let market = Normal::new(0.0, cfg.market_sigma).expect("finite sigma");
    let wick = Normal::new(0.0, 0.3 * cfg.noise_sigma).expect("finite sigma");

    let mut close = vec![vec![0.0; days]; n];
    let mut open = vec![vec![0.0; days]; n];
    let mut high = vec![vec![0.0; days]; n];
    let mut low = vec![vec![0.0; days]; n];
    let mut volume = vec![vec![0.0; days]; n];
    let mut signal = vec![vec![0.0; days]; n];
    let mut rsi: Vec<RunningRsi> = Vec::with_capacity(n);

    for i in 0..n {
        let p0 = 50.0 + 100.0 * rng.random::<f64>();
        close[i][0] = p0;
        open[i][0] = p0;
        rsi.push(RunningRsi::new(cfg.rsi_period, p0));
    }
    for d in 0..days {
        let m = market.sample(&mut rng);
        for i in 0..n {
            if d > 0 {
                let drift = cfg.alpha * signal[i][d - 1];
                let r = m + drift + noise.sample(&mut rng);
                let prev = close[i][d - 1];
                close[i][d] = prev * r.exp();
                open[i][d] = prev * (0.25 * r + wick.sample(&mut rng)).exp();
                if let Some(v) = rsi[i].push(close[i][d]) {
                    signal[i][d] = 0.5 - v / 100.0;
                }
            }
            let top = open[i][d].max(close[i][d]);
            let bottom = open[i][d].min(close[i][d]);
            high[i][d] = top * (1.0 + wick.sample(&mut rng).abs());
            low[i][d] = bottom * (1.0 - wick.sample(&mut rng).abs()).max(0.5);
            volume[i][d] = (1e6 * (1.0 + rng.random::<f64>())).round();
        }
    }

    let tickers = (0..n).map(|i| format!("S{i:02}")).collect();
    let panel = PricePanel::from_parts(
        tickers,
        business_days(cfg.start, days),
        open,
        high,
        low,
        close,
        volume,
    )?;
    Ok(SyntheticMarket { panel, signal })
}

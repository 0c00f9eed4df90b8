//! Technical indicators (MACD, RSI, CCI, ADX) and the agent state matrix.
//!
//! Indicator outputs are indexed by trading day. Entries before `valid_from`
//! are stored as NaN and reported as `None` by [`Indicator::get`].

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{sample_covariance, PricePanel};

pub const FEATURE_NAMES: [&str; 4] = ["macd", "rsi", "cci", "adx"];

const CCI_CONSTANT: f64 = 0.015;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndicatorParams {
    pub macd_fast: usize,
    pub macd_slow: usize,
    pub macd_signal: usize,
    pub rsi_period: usize,
    pub cci_period: usize,
    pub adx_period: usize,
}

impl Default for IndicatorParams {
    fn default() -> Self {
        Self {
            macd_fast: 12,
            macd_slow: 26,
            macd_signal: 9,
            rsi_period: 14,
            cci_period: 20,
            adx_period: 14,
        }
    }
}

impl IndicatorParams {
    /// First day index at which every indicator is defined.
    pub fn warmup(&self) -> usize {
        (self.macd_slow - 1)
            .max(self.rsi_period)
            .max(self.cci_period - 1)
            .max(2 * self.adx_period - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Indicator {
    pub values: Vec<f64>,
    pub valid_from: usize,
    /// Days where a zero denominator was replaced by the degenerate rule.
    pub degenerate: usize,
}

impl Indicator {
    pub fn get(&self, t: usize) -> Option<f64> {
        if t >= self.valid_from && t < self.values.len() {
            Some(self.values[t])
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn ema_seeded(series: &[f64], n: usize) -> Vec<f64> {
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut out = Vec::with_capacity(series.len());
    let mut acc = series[0];
    out.push(acc);
    for &x in &series[1..] {
        acc = alpha * x + (1.0 - alpha) * acc;
        out.push(acc);
    }
    out
}

/// MACD line: `EMA_fast - EMA_slow`, both seeded with the first close.
pub fn macd(close: &[f64], fast: usize, slow: usize) -> Result<Indicator> {
    if fast == 0 || slow <= fast {
        return Err(Error::Config(format!("bad MACD periods {fast}/{slow}")));
    }
    if close.len() <= slow {
        return Err(Error::SeriesTooShort {
            needed: slow,
            got: close.len(),
        });
    }
    let f = ema_seeded(close, fast);
    let s = ema_seeded(close, slow);
    let valid_from = slow - 1;
    let values = f
        .iter()
        .zip(&s)
        .enumerate()
        .map(|(t, (a, b))| if t >= valid_from { a - b } else { f64::NAN })
        .collect();
    Ok(Indicator {
        values,
        valid_from,
        degenerate: 0,
    })
}

/// Signal line (EMA of the MACD line over its defined part).
pub fn macd_signal(line: &Indicator, signal: usize) -> Indicator {
    let defined = &line.values[line.valid_from..];
    let mut values = vec![f64::NAN; line.valid_from];
    values.extend(ema_seeded(defined, signal));
    Indicator {
        values,
        valid_from: line.valid_from,
        degenerate: 0,
    }
}

/// Wilder RSI. Zero average loss gives 100.
pub fn rsi(close: &[f64], period: usize) -> Result<Indicator> {
    if period == 0 {
        return Err(Error::Config("RSI period must be positive".into()));
    }
    if close.len() <= period {
        return Err(Error::SeriesTooShort {
            needed: period,
            got: close.len(),
        });
    }
    let p = period as f64;
    let mut values = vec![f64::NAN; close.len()];
    let (mut gain, mut loss) = (0.0, 0.0);
    for t in 1..=period {
        let d = close[t] - close[t - 1];
        gain += d.max(0.0);
        loss += (-d).max(0.0);
    }
    gain /= p;
    loss /= p;
    let rsi_of = |g: f64, l: f64| {
        if l == 0.0 {
            100.0
        } else {
            100.0 - 100.0 / (1.0 + g / l)
        }
    };
    values[period] = rsi_of(gain, loss);
    for t in period + 1..close.len() {
        let d = close[t] - close[t - 1];
        gain = (gain * (p - 1.0) + d.max(0.0)) / p;
        loss = (loss * (p - 1.0) + (-d).max(0.0)) / p;
        values[t] = rsi_of(gain, loss);
    }
    Ok(Indicator {
        values,
        valid_from: period,
        degenerate: 0,
    })
}

/// Commodity channel index over the typical price `(H+L+C)/3`. A zero mean
/// absolute deviation yields 0.
pub fn cci(high: &[f64], low: &[f64], close: &[f64], period: usize) -> Result<Indicator> {
    check_hlc(high, low, close)?;
    if period == 0 {
        return Err(Error::Config("CCI period must be positive".into()));
    }
    if close.len() < period {
        return Err(Error::SeriesTooShort {
            needed: period - 1,
            got: close.len(),
        });
    }
    let tp: Vec<f64> = (0..close.len())
        .map(|t| (high[t] + low[t] + close[t]) / 3.0)
        .collect();
    let mut values = vec![f64::NAN; close.len()];
    let mut degenerate = 0;
    for t in period - 1..close.len() {
        let win = &tp[t + 1 - period..=t];
        let sma = win.iter().sum::<f64>() / period as f64;
        let mad = win.iter().map(|x| (x - sma).abs()).sum::<f64>() / period as f64;
        values[t] = if mad <= 1e-12 * sma.abs().max(1.0) {
            degenerate += 1;
            0.0
        } else {
            (tp[t] - sma) / (CCI_CONSTANT * mad)
        };
    }
    Ok(Indicator {
        values,
        valid_from: period - 1,
        degenerate,
    })
}

/// Average directional index with Wilder smoothing throughout.
pub fn adx(high: &[f64], low: &[f64], close: &[f64], period: usize) -> Result<Indicator> {
    check_hlc(high, low, close)?;
    if period == 0 {
        return Err(Error::Config("ADX period must be positive".into()));
    }
    let len = close.len();
    if len < 2 * period {
        return Err(Error::SeriesTooShort {
            needed: 2 * period - 1,
            got: len,
        });
    }
    let p = period as f64;
    let mut tr = vec![0.0; len];
    let mut plus_dm = vec![0.0; len];
    let mut minus_dm = vec![0.0; len];
    for t in 1..len {
        tr[t] = (high[t] - low[t])
            .max((high[t] - close[t - 1]).abs())
            .max((low[t] - close[t - 1]).abs());
        let up = high[t] - high[t - 1];
        let down = low[t - 1] - low[t];
        plus_dm[t] = if up > down && up > 0.0 { up } else { 0.0 };
        minus_dm[t] = if down > up && down > 0.0 { down } else { 0.0 };
    }

    let mut s_tr = tr[1..=period].iter().sum::<f64>() / p;
    let mut s_plus = plus_dm[1..=period].iter().sum::<f64>() / p;
    let mut s_minus = minus_dm[1..=period].iter().sum::<f64>() / p;
    let mut degenerate = 0;
    let mut dx = vec![f64::NAN; len];
    let mut dx_at = |s_tr: f64, s_plus: f64, s_minus: f64| {
        let (pdi, mdi) = if s_tr > 0.0 {
            (100.0 * s_plus / s_tr, 100.0 * s_minus / s_tr)
        } else {
            (0.0, 0.0)
        };
        if pdi + mdi > 0.0 {
            100.0 * (pdi - mdi).abs() / (pdi + mdi)
        } else {
            degenerate += 1;
            0.0
        }
    };
    dx[period] = dx_at(s_tr, s_plus, s_minus);
    for t in period + 1..len {
        s_tr += (tr[t] - s_tr) / p;
        s_plus += (plus_dm[t] - s_plus) / p;
        s_minus += (minus_dm[t] - s_minus) / p;
        dx[t] = dx_at(s_tr, s_plus, s_minus);
    }

    let first = 2 * period - 1;
    let mut values = vec![f64::NAN; len];
    let mut acc = dx[period..=first].iter().sum::<f64>() / p;
    values[first] = acc;
    for t in first + 1..len {
        acc = (acc * (p - 1.0) + dx[t]) / p;
        values[t] = acc;
    }
    Ok(Indicator {
        values,
        valid_from: first,
        degenerate,
    })
}

fn check_hlc(high: &[f64], low: &[f64], close: &[f64]) -> Result<()> {
    if high.len() != close.len() || low.len() != close.len() {
        return Err(Error::ShapeMismatch(
            "high/low/close series differ in length".into(),
        ));
    }
    Ok(())
}

/// Raw indicator values for every asset, `values[k][asset][day]`.
#[derive(Debug, Clone)]
pub struct FeatureTensor {
    pub names: Vec<String>,
    pub values: Vec<Vec<Vec<f64>>>,
    pub valid_from: Vec<usize>,
    /// Degenerate-denominator counts per feature, summed over assets.
    pub degenerate: Vec<usize>,
}

impl FeatureTensor {
    pub fn compute(panel: &PricePanel, params: &IndicatorParams) -> Result<Self> {
        let n = panel.n_assets();
        let mut values = vec![Vec::with_capacity(n); FEATURE_NAMES.len()];
        let mut valid_from = vec![0; FEATURE_NAMES.len()];
        let mut degenerate = vec![0; FEATURE_NAMES.len()];
        for i in 0..n {
            let (h, l, c) = (&panel.high[i], &panel.low[i], &panel.close[i]);
            let series = [
                macd(c, params.macd_fast, params.macd_slow)?,
                rsi(c, params.rsi_period)?,
                cci(h, l, c, params.cci_period)?,
                adx(h, l, c, params.adx_period)?,
            ];
            for (k, ind) in series.into_iter().enumerate() {
                valid_from[k] = ind.valid_from;
                degenerate[k] += ind.degenerate;
                values[k].push(ind.values);
            }
        }
        Ok(Self {
            names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            values,
            valid_from,
            degenerate,
        })
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn n_assets(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, k: usize, asset: usize, day: usize) -> Option<f64> {
        if day >= self.valid_from[k] {
            self.values[k][asset].get(day).copied()
        } else {
            None
        }
    }

    /// Raw cross-section of feature `k` on `day`.
    pub fn cross_section(&self, k: usize, day: usize) -> Result<Vec<f64>> {
        (0..self.n_assets())
            .map(|i| {
                self.get(k, i, day).ok_or_else(|| Error::FeatureUndefined {
                    feature: self.names[k].clone(),
                    slot: day,
                })
            })
            .collect()
    }

    /// Dump raw values as `date,ticker,macd,rsi,cci,adx`; undefined cells are empty.
    pub fn write_csv(&self, panel: &PricePanel, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        writeln!(out, "date,ticker,{}", self.names.join(","))?;
        for (d, date) in panel.dates.iter().enumerate() {
            for (i, ticker) in panel.tickers.iter().enumerate() {
                write!(out, "{},{}", date.format("%Y-%m-%d"), ticker)?;
                for k in 0..self.n_features() {
                    match self.get(k, i, d) {
                        Some(v) => write!(out, ",{v}")?,
                        None => write!(out, ",")?,
                    }
                }
                writeln!(out)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-feature divisors: the largest absolute raw value seen in the fitting
/// range. Scaling is a pure division, so cross-sectional sums keep their sign
/// and rankings are preserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub scales: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(k: usize) -> Self {
        Self { scales: vec![1.0; k] }
    }

    /// Fit on days `first..=last`; undefined entries are skipped.
    pub fn fit(features: &FeatureTensor, first: usize, last: usize) -> Self {
        let scales = (0..features.n_features())
            .map(|k| {
                let mut m = 0.0f64;
                for i in 0..features.n_assets() {
                    for d in first..=last {
                        if let Some(v) = features.get(k, i, d) {
                            m = m.max(v.abs());
                        }
                    }
                }
                if m > 0.0 {
                    m
                } else {
                    1.0
                }
            })
            .collect();
        Self { scales }
    }

    pub fn apply(&self, k: usize, value: f64) -> f64 {
        value / self.scales[k]
    }
}

/// Scaled feature cross-sections known at the beginning of slot `t`, i.e.
/// computed from day `t-1`. Returned as `[k][asset]`.
pub fn slot_features(
    features: &FeatureTensor,
    scaler: &FeatureScaler,
    t: usize,
) -> Result<Vec<Vec<f64>>> {
    if t == 0 {
        return Err(Error::FeatureUndefined {
            feature: features.names.first().cloned().unwrap_or_default(),
            slot: t,
        });
    }
    (0..features.n_features())
        .map(|k| {
            let raw = features.cross_section(k, t - 1).map_err(|_| Error::FeatureUndefined {
                feature: features.names[k].clone(),
                slot: t,
            })?;
            Ok(raw.into_iter().map(|v| scaler.apply(k, v)).collect())
        })
        .collect()
}

/// Agent observation `s(t)`: an `N x (K+N)` matrix whose row `i` holds the `K`
/// scaled features of asset `i` followed by row `i` of the covariance
/// estimate. Stored row-major, so entry `(i, c)` lives at `i * (K+N) + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub n_assets: usize,
    pub n_features: usize,
    pub data: Vec<f64>,
}

impl State {
    pub fn from_blocks(features: &[Vec<f64>], cov: &DMatrix<f64>) -> Self {
        let k = features.len();
        let n = cov.nrows();
        let mut data = Vec::with_capacity(n * (n + k));
        for i in 0..n {
            for f in features {
                data.push(f[i]);
            }
            for j in 0..n {
                data.push(cov[(i, j)]);
            }
        }
        Self {
            n_assets: n,
            n_features: k,
            data,
        }
    }

    pub fn n_cols(&self) -> usize {
        self.n_features + self.n_assets
    }

    /// Flat index of feature `k` for asset `i`.
    pub fn feature_index(&self, k: usize, i: usize) -> usize {
        i * self.n_cols() + k
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_cols() + col]
    }

    pub fn feature_column(&self, k: usize) -> Vec<f64> {
        (0..self.n_assets)
            .map(|i| self.data[self.feature_index(k, i)])
            .collect()
    }
}

/// State for slot `t` from the scaled features of day `t-1` and the
/// covariance of the `window` relatives before slot `t`.
pub fn build_state(
    panel: &PricePanel,
    features: &FeatureTensor,
    scaler: &FeatureScaler,
    t: usize,
    window: usize,
) -> Result<State> {
    let f = slot_features(features, scaler, t)?;
    let cov = sample_covariance(panel, t, window)?;
    Ok(State::from_blocks(&f, &cov.matrix))
}

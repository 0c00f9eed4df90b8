//! Price panel ingestion, price relatives and rolling covariance estimates.
//!
//! A panel holds `T+1` aligned trading days for `N` assets. Slot `t` (for
//! `1 <= t <= T`) is the trading period between the closes at day `t-1` and
//! day `t`; its price relative is `close(t) / close(t-1)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 7] = ["date", "ticker", "open", "high", "low", "close", "volume"];

/// Diagonal jitter added on top of `|lambda_min|` when repairing a covariance.
pub const PSD_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    pub tickers: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// `[asset][day]` matrices.
    pub open: Vec<Vec<f64>>,
    pub high: Vec<Vec<f64>>,
    pub low: Vec<Vec<f64>>,
    pub close: Vec<Vec<f64>>,
    pub volume: Vec<Vec<f64>>,
}

/// Price relatives `y(t)` for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeVector {
    pub slot: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CovEstimate {
    pub slot: usize,
    pub matrix: DMatrix<f64>,
    pub window: usize,
    /// True when diagonal loading was applied.
    pub conditioned: bool,
}

#[derive(Debug, Clone, Copy)]
struct Bar {
    open: f64,
    high: f64,
    low: f64,
    close: f64,
    volume: f64,
}

impl PricePanel {
    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    /// Number of tradable slots `T`.
    pub fn n_slots(&self) -> usize {
        self.dates.len().saturating_sub(1)
    }

    /// Build a panel from in-memory matrices, checking shape and price invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        tickers: Vec<String>,
        dates: Vec<NaiveDate>,
        open: Vec<Vec<f64>>,
        high: Vec<Vec<f64>>,
        low: Vec<Vec<f64>>,
        close: Vec<Vec<f64>>,
        volume: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = tickers.len();
        let days = dates.len();
        if n == 0 || days == 0 {
            return Err(Error::EmptyIntersection);
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("dates must be strictly increasing".into()));
        }
        for m in [&open, &high, &low, &close, &volume] {
            if m.len() != n || m.iter().any(|row| row.len() != days) {
                return Err(Error::ShapeMismatch(format!(
                    "panel matrices must be {n}x{days}"
                )));
            }
        }
        for (i, ticker) in tickers.iter().enumerate() {
            for (d, date) in dates.iter().enumerate() {
                let prices = [open[i][d], high[i][d], low[i][d], close[i][d]];
                if prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                    return Err(Error::NonPositivePrice {
                        ticker: ticker.clone(),
                        date: *date,
                    });
                }
                if !(volume[i][d].is_finite() && volume[i][d] >= 0.0) {
                    return Err(Error::UnparsableRow {
                        line: 0,
                        reason: format!("negative volume for {ticker} on {date}"),
                    });
                }
            }
        }
        Ok(Self {
            tickers,
            dates,
            open,
            high,
            low,
            close,
            volume,
        })
    }

    /// Panel restricted to the first `days` trading days.
    pub fn truncated(&self, days: usize) -> Self {
        let cut = |m: &Vec<Vec<f64>>| m.iter().map(|r| r[..days].to_vec()).collect();
        Self {
            tickers: self.tickers.clone(),
            dates: self.dates[..days].to_vec(),
            open: cut(&self.open),
            high: cut(&self.high),
            low: cut(&self.low),
            close: cut(&self.close),
            volume: cut(&self.volume),
        }
    }

    /// Index of the first day on or after `date`.
    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.iter().position(|d| *d >= date)
    }
}

/// Load a long-format OHLCV CSV and align it on the dates shared by all tickers.
pub fn load_panel(path: &Path, tickers: Option<&[String]>) -> Result<PricePanel> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut col = [0usize; 7];
    for (slot, name) in CSV_HEADER.iter().enumerate() {
        col[slot] = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }

    let wanted: Option<BTreeSet<&str>> =
        tickers.map(|t| t.iter().map(String::as_str).collect());
    let mut rows: BTreeMap<String, BTreeMap<NaiveDate, Bar>> = BTreeMap::new();

    for (idx, record) in reader.records().enumerate() {
        // header is line 1
        let line = idx + 2;
        let record = record.map_err(|e| Error::UnparsableRow {
            line,
            reason: e.to_string(),
        })?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let ticker = field(col[1]).to_string();
        if let Some(w) = &wanted {
            if !w.contains(ticker.as_str()) {
                continue;
            }
        }
        let date = NaiveDate::parse_from_str(field(col[0]), "%Y-%m-%d").map_err(|e| {
            Error::UnparsableRow {
                line,
                reason: format!("bad date `{}`: {e}", field(col[0])),
            }
        })?;
        let num = |c: usize, name: &str| -> Result<f64> {
            field(c).parse::<f64>().map_err(|_| Error::UnparsableRow {
                line,
                reason: format!("bad {name} `{}`", field(c)),
            })
        };
        let bar = Bar {
            open: num(col[2], "open")?,
            high: num(col[3], "high")?,
            low: num(col[4], "low")?,
            close: num(col[5], "close")?,
            volume: num(col[6], "volume")?,
        };
        if [bar.open, bar.high, bar.low, bar.close]
            .iter()
            .any(|p| !(p.is_finite() && *p > 0.0))
        {
            return Err(Error::NonPositivePrice { ticker, date });
        }
        if !(bar.volume.is_finite() && bar.volume >= 0.0) {
            return Err(Error::UnparsableRow {
                line,
                reason: format!("bad volume `{}`", field(col[6])),
            });
        }
        rows.entry(ticker).or_default().insert(date, bar);
    }

    if let Some(w) = &wanted {
        if w.iter().any(|t| !rows.contains_key(*t)) {
            return Err(Error::EmptyIntersection);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyIntersection);
    }

    let mut common: Option<BTreeSet<NaiveDate>> = None;
    for series in rows.values() {
        let dates: BTreeSet<NaiveDate> = series.keys().copied().collect();
        common = Some(match common {
            None => dates,
            Some(c) => c.intersection(&dates).copied().collect(),
        });
    }
    let dates: Vec<NaiveDate> = common.unwrap_or_default().into_iter().collect();
    if dates.is_empty() {
        return Err(Error::EmptyIntersection);
    }

    let n = rows.len();
    let mut panel = PricePanel {
        tickers: rows.keys().cloned().collect(),
        dates: dates.clone(),
        open: vec![Vec::with_capacity(dates.len()); n],
        high: vec![Vec::with_capacity(dates.len()); n],
        low: vec![Vec::with_capacity(dates.len()); n],
        close: vec![Vec::with_capacity(dates.len()); n],
        volume: vec![Vec::with_capacity(dates.len()); n],
    };
    for (i, series) in rows.values().enumerate() {
        for d in &dates {
            let bar = series[d];
            panel.open[i].push(bar.open);
            panel.high[i].push(bar.high);
            panel.low[i].push(bar.low);
            panel.close[i].push(bar.close);
            panel.volume[i].push(bar.volume);
        }
    }
    Ok(panel)
}

/// Write a panel in the same long format `load_panel` reads. Floats use the
/// shortest round-trip representation so a reload is bit-exact.
pub fn write_panel(panel: &PricePanel, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for (d, date) in panel.dates.iter().enumerate() {
        for (i, ticker) in panel.tickers.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                date.format("%Y-%m-%d"),
                ticker,
                panel.open[i][d],
                panel.high[i][d],
                panel.low[i][d],
                panel.close[i][d],
                panel.volume[i][d]
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn price_relatives(panel: &PricePanel, t: usize) -> Result<RelativeVector> {
    let max = panel.n_slots();
    if t == 0 || t > max {
        return Err(Error::SlotOutOfRange { slot: t, max });
    }
    let values = panel.close.iter().map(|c| c[t] / c[t - 1]).collect();
    Ok(RelativeVector { slot: t, values })
}

/// Covariance estimate available at the beginning of slot `t`: the `window`
/// relatives of slots `t-window ..= t-1`.
pub fn sample_covariance(panel: &PricePanel, t: usize, window: usize) -> Result<CovEstimate> {
    if t == 0 {
        return Err(Error::InsufficientHistory {
            slot: t,
            needed: window,
            available: 0,
        });
    }
    let mut est = covariance_through(panel, t - 1, window).map_err(|e| match e {
        Error::InsufficientHistory {
            needed, available, ..
        } => Error::InsufficientHistory {
            slot: t,
            needed,
            available,
        },
        other => other,
    })?;
    est.slot = t;
    Ok(est)
}

/// Covariance of the `window` relatives ending at slot `last` inclusive. Used
/// as the realized covariance of slot `last` by the hindsight model.
pub fn realized_covariance(panel: &PricePanel, last: usize, window: usize) -> Result<CovEstimate> {
    covariance_through(panel, last, window)
}

fn covariance_through(panel: &PricePanel, last: usize, window: usize) -> Result<CovEstimate> {
    if window < 2 {
        return Err(Error::Config(format!("covariance window must be >= 2, got {window}")));
    }
    if last > panel.n_slots() {
        return Err(Error::SlotOutOfRange {
            slot: last,
            max: panel.n_slots(),
        });
    }
    // relatives exist for slots 1..=last
    if last < window {
        return Err(Error::InsufficientHistory {
            slot: last,
            needed: window,
            available: last,
        });
    }
    let n = panel.n_assets();
    let first = last + 1 - window;
    let rel: Vec<Vec<f64>> = panel
        .close
        .iter()
        .map(|c| (first..=last).map(|s| c[s] / c[s - 1]).collect())
        .collect();
    let means: Vec<f64> = rel.iter().map(|r| r.iter().sum::<f64>() / window as f64).collect();
    let denom = (window - 1) as f64;
    let mut s = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let acc: f64 = rel[a]
                .iter()
                .zip(&rel[b])
                .map(|(x, y)| (x - means[a]) * (y - means[b]))
                .sum();
            s[(a, b)] = acc / denom;
            s[(b, a)] = acc / denom;
        }
    }
    let (matrix, conditioned) = condition_psd(s);
    Ok(CovEstimate {
        slot: last,
        matrix,
        window,
        conditioned,
    })
}

/// Symmetrize and, when the smallest eigenvalue is not positive, load the
/// diagonal with `|lambda_min| + PSD_JITTER`.
pub fn condition_psd(s: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let mut m = (&s + s.transpose()) * 0.5;
    let lambda_min = min_eigenvalue(&m);
    if lambda_min <= 0.0 {
        let shift = lambda_min.abs() + PSD_JITTER;
        for i in 0..m.nrows() {
            m[(i, i)] += shift;
        }
        (m, true)
    } else {
        (m, false)
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

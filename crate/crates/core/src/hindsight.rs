//! Linear model in hindsight: per-slot cross-sectional regression of the
//! hindsight portfolio's value relatives on the features, and the reference
//! feature weights derived from it.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{slot_features, FeatureScaler, FeatureTensor};
use crate::market_data::{price_relatives, realized_covariance, PricePanel};
use crate::mean_variance::{hindsight_weights, SolverOptions};

pub const MAX_CONDITION: f64 = 1e10;

/// `q(t) = w(t) * y(t)` elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct QVector {
    pub slot: usize,
    pub values: Vec<f64>,
}

impl QVector {
    pub fn new(slot: usize, weights: &[f64], relatives: &[f64]) -> Self {
        Self {
            slot,
            values: weights.iter().zip(relatives).map(|(w, y)| w * y).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub intercept: f64,
    pub coefs: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Per-slot length-K weight vectors (reference weights, ML weights or IG weights).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeightSeries {
    pub slots: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

impl FeatureWeightSeries {
    pub fn push(&mut self, slot: usize, w: Vec<f64>) {
        debug_assert!(self.slots.last().is_none_or(|s| *s < slot));
        self.slots.push(slot);
        self.weights.push(w);
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, slot: usize) -> Option<&[f64]> {
        self.slots
            .binary_search(&slot)
            .ok()
            .map(|i| self.weights[i].as_slice())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            slots: self.slots.clone(),
            weights: self
                .weights
                .iter()
                .map(|w| w.iter().map(|x| x * c).collect())
                .collect(),
        }
    }

    /// CSV dump `date,<prefix>_<name>...`, one row per slot.
    pub fn write_csv(
        &self,
        path: &Path,
        panel: &PricePanel,
        prefix: &str,
        names: &[String],
    ) -> Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        write!(out, "date")?;
        for n in names {
            write!(out, ",{prefix}_{n}")?;
        }
        writeln!(out)?;
        for (slot, w) in self.slots.iter().zip(&self.weights) {
            write!(out, "{}", panel.dates[*slot].format("%Y-%m-%d"))?;
            for x in w {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// OLS of `q` on an intercept and the `K` feature cross-sections via the
/// normal equations. Regressors are centred first, so the symmetric system
/// only involves the slope block.
pub fn cross_sectional_ols(q: &[f64], features: &[Vec<f64>]) -> Result<RegressionFit> {
    let n = q.len();
    let k = features.len();
    if features.iter().any(|f| f.len() != n) {
        return Err(Error::ShapeMismatch("feature cross-section length != N".into()));
    }
    if n <= k + 1 {
        return Err(Error::TooFewSamples(n));
    }
    if q.iter().chain(features.iter().flatten()).any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let nf = n as f64;
    let q_mean = q.iter().sum::<f64>() / nf;
    let f_means: Vec<f64> = features.iter().map(|f| f.iter().sum::<f64>() / nf).collect();
    let xc = DMatrix::from_fn(n, k, |i, j| features[j][i] - f_means[j]);
    let qc = DVector::from_fn(n, |i, _| q[i] - q_mean);

    let xtx = xc.transpose() * &xc;
    let eig = SymmetricEigen::new(xtx.clone()).eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    // condition number of the regressor block, not of X'X
    let condition = if lo > 0.0 { (hi / lo).sqrt() } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(Error::RankDeficient { condition });
    }
    let xtq = xc.transpose() * &qc;
    let coefs = xtx
        .cholesky()
        .ok_or(Error::RankDeficient { condition })?
        .solve(&xtq);
    let intercept = q_mean - coefs.dot(&DVector::from_vec(f_means.clone()));
    let residuals = (0..n)
        .map(|i| {
            q[i] - intercept
                - (0..k).map(|j| coefs[j] * features[j][i]).sum::<f64>()
        })
        .collect();
    Ok(RegressionFit {
        intercept,
        coefs: coefs.as_slice().to_vec(),
        residuals,
    })
}

/// Coefficient times the cross-sectional sum of its feature.
pub fn reference_feature_weights(fit: &RegressionFit, features: &[Vec<f64>]) -> Vec<f64> {
    fit.coefs
        .iter()
        .zip(features)
        .map(|(b, f)| b * f.iter().sum::<f64>())
        .collect()
}

/// Forward-looking `W`-slot average. Output slot `t` averages the entries in
/// `[t, t+W-1]`, and exists only when `t+W-1` does not pass the last slot.
pub fn smooth_reference(series: &FeatureWeightSeries, window: usize) -> Result<FeatureWeightSeries> {
    if window == 0 || window > series.len() {
        return Err(Error::WindowTooLong {
            window,
            len: series.len(),
        });
    }
    let last = *series.slots.last().expect("non-empty");
    let k = series.weights[0].len();
    let mut out = FeatureWeightSeries::default();
    for (pos, &t) in series.slots.iter().enumerate() {
        let end = t + window - 1;
        if end > last {
            break;
        }
        let mut acc = vec![0.0; k];
        let mut count = 0usize;
        for (s, w) in series.slots[pos..].iter().zip(&series.weights[pos..]) {
            if *s > end {
                break;
            }
            for (a, x) in acc.iter_mut().zip(w) {
                *a += x;
            }
            count += 1;
        }
        out.push(t, acc.into_iter().map(|a| a / count as f64).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SkippedSlot {
    pub slot: usize,
    pub reason: String,
}

/// Intermediate products of the hindsight model for one slot.
#[derive(Debug, Clone)]
pub struct HindsightSlot {
    pub weights: Vec<f64>,
    pub q: QVector,
    pub fit: RegressionFit,
    pub beta: Vec<f64>,
}

pub fn hindsight_slot(
    panel: &PricePanel,
    features: &FeatureTensor,
    scaler: &FeatureScaler,
    t: usize,
    lambda: f64,
    window: usize,
    opts: &SolverOptions,
) -> Result<HindsightSlot> {
    let y = price_relatives(panel, t)?;
    let sigma = realized_covariance(panel, t, window)?;
    let w = hindsight_weights(&y, &sigma, lambda, opts)?;
    let q = QVector::new(t, &w.values, &y.values);
    let f = slot_features(features, scaler, t)?;
    let fit = cross_sectional_ols(&q.values, &f)?;
    let beta = reference_feature_weights(&fit, &f);
    Ok(HindsightSlot {
        weights: w.values,
        q,
        fit,
        beta,
    })
}

/// Reference weights `beta(t)` for every slot in `slots`. Failing slots are
/// skipped and reported.
pub fn reference_pipeline(
    panel: &PricePanel,
    features: &FeatureTensor,
    scaler: &FeatureScaler,
    slots: std::ops::RangeInclusive<usize>,
    lambda: f64,
    window: usize,
    opts: &SolverOptions,
) -> (FeatureWeightSeries, Vec<SkippedSlot>) {
    let mut series = FeatureWeightSeries::default();
    let mut skipped = Vec::new();
    for t in slots {
        match hindsight_slot(panel, features, scaler, t, lambda, window, opts) {
            Ok(s) => series.push(t, s.beta),
            Err(e) => {
                debug!("reference weights: skipping slot {t}: {e}");
                skipped.push(SkippedSlot {
                    slot: t,
                    reason: e.to_string(),
                });
            }
        }
    }
    (series, skipped)
}

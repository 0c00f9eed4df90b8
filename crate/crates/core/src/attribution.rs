//! Integrated gradients, per-feature weights of a trained critic, and the
//! correlation statistics used to compare feature weights against the
//! hindsight reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::State;
use crate::hindsight::{smooth_reference, FeatureWeightSeries};
use crate::nn::DenseNet;

/// One-sided normal critical values for the 10% and 5% levels.
pub const Z_CRIT_10: f64 = 1.2816;
pub const Z_CRIT_5: f64 = 1.6449;

/// A differentiable scalar function of a flat input.
pub trait ScalarFunction {
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl ScalarFunction for DenseNet {
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.value_and_input_grad(x)
    }
}

impl<F> ScalarFunction for F
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(self(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgConfig {
    /// Midpoint-rule resolution `m`.
    pub path_steps: usize,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self { path_steps: 64 }
    }
}

/// Integrated gradients of `f` at `x` against `baseline`, every input entry,
/// using the midpoint rule on the straight path.
pub fn integrated_gradients_path<F: ScalarFunction + ?Sized>(
    f: &F,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("path_steps must be >= 1".into()));
    }
    if x.len() != baseline.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: baseline.len(),
        });
    }
    let diff: Vec<f64> = x.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mut acc = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for j in 0..steps {
        let alpha = (j as f64 + 0.5) / steps as f64;
        for ((p, b), d) in point.iter_mut().zip(baseline).zip(&diff) {
            *p = b + alpha * d;
        }
        let (_, g) = f.value_and_grad(&point)?;
        if g.len() != x.len() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += gi;
        }
    }
    Ok(acc
        .iter()
        .zip(&diff)
        .map(|(a, d)| d * a / steps as f64)
        .collect())
}

/// Copy of `state` with the listed feature columns set to zero.
pub fn zero_feature_columns(state: &State, ks: &[usize]) -> Vec<f64> {
    let mut out = state.data.clone();
    for &k in ks {
        for i in 0..state.n_assets {
            out[state.feature_index(k, i)] = 0.0;
        }
    }
    out
}

/// Per-asset IG of feature `k`: only column `k` moves along the path, the
/// rest of the state stays at its observed value.
pub fn integrated_gradients<F: ScalarFunction + ?Sized>(
    f: &F,
    state: &State,
    k: usize,
    cfg: &IgConfig,
) -> Result<Vec<f64>> {
    let baseline = zero_feature_columns(state, &[k]);
    let ig = integrated_gradients_path(f, &state.data, &baseline, cfg.path_steps)?;
    Ok((0..state.n_assets)
        .map(|i| ig[state.feature_index(k, i)])
        .collect())
}

/// `M(t)_k = sum_i IG(f^k(t))_i` for a critic `V(s)`.
pub fn drl_feature_weights<F: ScalarFunction + ?Sized>(
    critic: &F,
    state: &State,
    cfg: &IgConfig,
) -> Result<Vec<f64>> {
    (0..state.n_features)
        .map(|k| Ok(integrated_gradients(critic, state, k, cfg)?.iter().sum()))
        .collect()
}

/// Pearson correlation across components; `None` when either side is constant.
pub fn correlate(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0 && sbb > 0.0) || !(saa.is_finite() && sbb.is_finite()) {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PowerMode {
    Single,
    Multi(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSeries {
    pub mode: PowerMode,
    pub slots: Vec<usize>,
    pub rho: Vec<Option<f64>>,
}

impl CorrelationSeries {
    pub fn defined(&self) -> Vec<f64> {
        self.rho.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPower {
    pub series: CorrelationSeries,
    /// Mean over defined slots; `None` if every slot is undefined.
    pub mean: Option<f64>,
    pub n_defined: usize,
    pub n_undefined: usize,
}

/// Mean correlation of `series(t)` with `reference(t)` (single) or with the
/// forward `W`-slot average of the reference (multi).
pub fn prediction_power(
    series: &FeatureWeightSeries,
    reference: &FeatureWeightSeries,
    mode: PowerMode,
) -> Result<PredictionPower> {
    let target = match mode {
        PowerMode::Single => reference.clone(),
        PowerMode::Multi(w) => smooth_reference(reference, w)?,
    };
    let mut out = CorrelationSeries {
        mode,
        slots: Vec::new(),
        rho: Vec::new(),
    };
    for (slot, w) in series.slots.iter().zip(&series.weights) {
        if let Some(r) = target.get(*slot) {
            out.slots.push(*slot);
            out.rho.push(correlate(w, r));
        }
    }
    if out.slots.is_empty() {
        return Err(Error::NoOverlap);
    }
    let defined = out.defined();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(PredictionPower {
        n_defined: defined.len(),
        n_undefined: out.rho.len() - defined.len(),
        series: out,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZTestResult {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub z: f64,
    pub stars: String,
}

impl ZTestResult {
    pub fn from_summary(n: usize, mean: f64, std: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::TooFewSamples(n));
        }
        if !(std > 0.0) {
            return Err(Error::ZeroVariance);
        }
        let z = mean / (std / (n as f64).sqrt());
        let stars = if z > Z_CRIT_5 {
            "***"
        } else if z > Z_CRIT_10 {
            "**"
        } else {
            ""
        };
        Ok(Self {
            n,
            mean,
            std,
            z,
            stars: stars.to_string(),
        })
    }
}

/// Upper-tail test of `H0: mean correlation = 0` with the sample std.
pub fn upper_tail_z(rhos: &[f64]) -> Result<ZTestResult> {
    let n = rhos.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mean = rhos.iter().sum::<f64>() / n as f64;
    let var = rhos.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    ZTestResult::from_summary(n, mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Uniform bins over `[-1, 1]`; the last bin is closed. Undefined entries
/// are not counted.
pub fn histogram(rhos: &[Option<f64>], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let edges = (0..=bins)
        .map(|b| -1.0 + 2.0 * b as f64 / bins as f64)
        .collect();
    let mut counts = vec![0usize; bins];
    for r in rhos.iter().flatten() {
        let pos = ((r + 1.0) / 2.0 * bins as f64).floor();
        let b = (pos.max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Histogram { edges, counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlation_identities() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((correlate(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((correlate(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((correlate(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(correlate(&a, &[2.0; 4]), None);
    }

    #[test]
    fn z_test_arithmetic() {
        let z = ZTestResult::from_summary(100, 0.2, 1.0).unwrap();
        assert!((z.z - 2.0).abs() < 1e-12);
        assert_eq!(z.stars, "***");
        let sym = upper_tail_z(&[0.3, -0.3, 0.3, -0.3]).unwrap();
        assert_eq!(sym.z, 0.0);
        assert_eq!(sym.stars, "");
        assert!(matches!(upper_tail_z(&[0.1, 0.1]), Err(Error::ZeroVariance)));
        assert!(matches!(upper_tail_z(&[0.1]), Err(Error::TooFewSamples(1))));
        assert_eq!(ZTestResult::from_summary(100, 0.14, 1.0).unwrap().stars, "**");
    }

    #[test]
    fn histogram_edges_and_counts() {
        let h = histogram(&[Some(0.0); 5], 4);
        assert_eq!(h.counts, vec![0, 0, 5, 0]);
        assert_eq!(h.edges, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        let h = histogram(&[], 3);
        assert_eq!(h.counts, vec![0, 0, 0]);
        let h = histogram(&[Some(-1.0), Some(1.0), None], 2);
        assert_eq!(h.counts, vec![1, 1]);
    }

    #[test]
    fn ig_of_constant_is_zero() {
        let f = |x: &[f64]| (3.0, vec![0.0; x.len()]);
        let ig = integrated_gradients_path(&f, &[1.0, 2.0], &[0.0, 0.0], 16).unwrap();
        assert_eq!(ig, vec![0.0, 0.0]);
    }
}

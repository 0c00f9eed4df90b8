mod common;

use common::{normal, panel_from_closes, random_walks, rng, synthetic};
use hindsight_core::features::{slot_features, FeatureScaler, FeatureTensor, IndicatorParams};
use hindsight_core::hindsight::{
    cross_sectional_ols, hindsight_slot, reference_pipeline, smooth_reference, FeatureWeightSeries, QVector,
};
use hindsight_core::market_data::{price_relatives, realized_covariance};
use hindsight_core::mean_variance::{hindsight_weights, SolverOptions};
use hindsight_core::ml::ml_feature_weights;
use proptest::prelude::*;

fn random_series(seed: u64, len: usize, k: usize) -> FeatureWeightSeries {
    let mut r = rng(seed);
    let mut s = FeatureWeightSeries::default();
    for t in 0..len {
        s.push(100 + t, (0..k).map(|_| normal(&mut r)).collect());
    }
    s
}

#[test]
fn smoothing_is_a_forward_mean() {
    let s = random_series(1, 50, 4);
    let sm = smooth_reference(&s, 7).unwrap();
    assert_eq!(sm.len(), 44);
    for (pos, t) in sm.slots.iter().enumerate() {
        for k in 0..4 {
            let want: f64 = (0..7).map(|j| s.weights[pos + j][k]).sum::<f64>() / 7.0;
            assert!((sm.weights[pos][k] - want).abs() < 1e-14);
        }
        assert_eq!(*t, s.slots[pos]);
    }
    assert_eq!(smooth_reference(&s, 1).unwrap(), s);
    assert!(smooth_reference(&s, 51).is_err());
}

#[test]
fn smoothing_is_linear() {
    let a = random_series(2, 40, 3);
    let b = random_series(3, 40, 3);
    let mut mix = FeatureWeightSeries::default();
    for (t, (x, y)) in a.slots.iter().zip(a.weights.iter().zip(&b.weights)) {
        mix.push(*t, x.iter().zip(y).map(|(p, q)| 2.0 * p - 0.5 * q).collect());
    }
    let (sa, sb, sm) = (
        smooth_reference(&a, 5).unwrap(),
        smooth_reference(&b, 5).unwrap(),
        smooth_reference(&mix, 5).unwrap(),
    );
    for i in 0..sm.len() {
        for k in 0..3 {
            let want = 2.0 * sa.weights[i][k] - 0.5 * sb.weights[i][k];
            assert!((sm.weights[i][k] - want).abs() < 1e-13);
        }
    }
}

#[test]
fn reference_weights_compose_the_stages() {
    let panel = synthetic(8, 160, 0.02, 4);
    let features = FeatureTensor::compute(&panel, &IndicatorParams::default()).unwrap();
    let scaler = FeatureScaler::fit(&features, 40, 100);
    let opts = SolverOptions::default();
    let (beta, skipped) = reference_pipeline(&panel, &features, &scaler, 70..=159, 2.0, 40, &opts);
    assert!(skipped.is_empty());
    assert_eq!(beta.len(), 90);
    for t in [70, 101, 159] {
        let y = price_relatives(&panel, t).unwrap();
        let w = hindsight_weights(&y, &realized_covariance(&panel, t, 40).unwrap(), 2.0, &opts).unwrap();
        let q: Vec<f64> = w.values.iter().zip(&y.values).map(|(a, b)| a * b).collect();
        let f = slot_features(&features, &scaler, t).unwrap();
        let fit = cross_sectional_ols(&q, &f).unwrap();
        let want: Vec<f64> = (0..4).map(|k| fit.coefs[k] * f[k].iter().sum::<f64>()).collect();
        assert_eq!(beta.get(t).unwrap(), want.as_slice());

        // an ML strategy that happens to pick the hindsight weights gets b = beta
        let b = ml_feature_weights(&QVector::new(t, &w.values, &y.values), &f).unwrap();
        assert_eq!(b, want);

        let slot = hindsight_slot(&panel, &features, &scaler, t, 2.0, 40, &opts).unwrap();
        assert_eq!(slot.q.values, q);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ols_residuals_are_orthogonal(seed in any::<u64>(), n in 8usize..30) {
        let mut r = rng(seed);
        let f: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| normal(&mut r)).collect()).collect();
        let q: Vec<f64> = (0..n).map(|_| 1.0 + 0.1 * normal(&mut r)).collect();
        let fit = cross_sectional_ols(&q, &f).unwrap();
        prop_assert!(fit.residuals.iter().sum::<f64>().abs() < 1e-12);
        for col in &f {
            let dot: f64 = col.iter().zip(&fit.residuals).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() < 1e-12);
        }
    }

    #[test]
    fn ols_is_invariant_to_shifting_a_feature(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut r = rng(seed);
        let mut f: Vec<Vec<f64>> = (0..4).map(|_| (0..20).map(|_| normal(&mut r)).collect()).collect();
        let q: Vec<f64> = (0..20).map(|_| normal(&mut r)).collect();
        let a = cross_sectional_ols(&q, &f).unwrap();
        f[2].iter_mut().for_each(|x| *x += shift);
        let b = cross_sectional_ols(&q, &f).unwrap();
        for (x, y) in a.coefs.iter().zip(&b.coefs) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}

/// Relatives that are an exact cross-sectional linear function of the MACD of
/// the previous day, `y_i = m(t) (1 - a macd_i)`, after a noisy warm-up.
fn macd_driven_market(seed: u64, n: usize, days: usize, a: f64) -> hindsight_core::market_data::PricePanel {
    let mut r = rng(seed);
    let warm = 40;
    let mut close = random_walks(&mut r, n, warm, 0.02);
    for row in close.iter_mut() {
        row.resize(days, 0.0);
    }
    for d in warm..days {
        let past: Vec<Vec<f64>> = close.iter().map(|c| c[..d].to_vec()).collect();
        let f = FeatureTensor::compute(&panel_from_closes(past), &IndicatorParams::default()).unwrap();
        let m = 1.0;
        for i in 0..n {
            let macd = f.get(0, i, d - 1).unwrap();
            close[i][d] = close[i][d - 1] * m * (1.0 - a * macd);
        }
    }
    panel_from_closes(close)
}

#[test]
fn planted_linear_feature_dominates_the_regression() {
    let (mut dominant, mut negative, mut total) = (0, 0, 0);
    for seed in 0..6 {
        let panel = macd_driven_market(seed, 8, 175, 0.01);
        let features = FeatureTensor::compute(&panel, &IndicatorParams::default()).unwrap();
        let scaler = FeatureScaler::fit(&features, 40, 174);
        // From slot 71 on the covariance window lies inside the planted regime.
        for t in 71..=174 {
            let slot = hindsight_slot(&panel, &features, &scaler, t, 1.0, 30, &SolverOptions::default()).unwrap();
            let c = &slot.fit.coefs;
            total += 1;
            dominant += usize::from(c[1..].iter().all(|x| x.abs() < c[0].abs()));
            negative += usize::from(c[0] < 0.0);
        }
    }
    let frac = |x: usize| x as f64 / total as f64;
    assert!(frac(dominant) >= 0.95, "dominant in {dominant}/{total}");
    assert!(frac(negative) >= 0.95, "negative in {negative}/{total}");
}

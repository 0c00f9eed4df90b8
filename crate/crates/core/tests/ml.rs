mod common;

use common::{normal, rng, synthetic};
use hindsight_core::backtest::{self, EqualWeight, MarketContext, MlStrategy, PERIODS_PER_YEAR};
use hindsight_core::features::{FeatureScaler, FeatureTensor, IndicatorParams};
use hindsight_core::mean_variance::SolverOptions;
use hindsight_core::ml::{fit, training_samples, MlHyperparams, ModelParams, RegressorKind};
use proptest::prelude::*;

fn dataset(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = rng(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| normal(&mut r)).collect()).collect();
    let y = x
        .iter()
        .map(|row| 1.0 + 0.3 * row[0] - 0.2 * row[2] + (row[1] * 3.0).sin() * 0.1 + 0.05 * normal(&mut r))
        .collect();
    (x, y)
}

fn sse(kind: RegressorKind, hyper: &MlHyperparams, x: &[Vec<f64>], y: &[f64]) -> f64 {
    let m = fit(kind, x, y, hyper, 1).unwrap();
    x.iter().zip(y).map(|(r, t)| (m.predict(r).unwrap() - t).powi(2)).sum()
}

#[test]
fn linear_regression_recovers_a_noise_free_plane() {
    let mut r = rng(1);
    let x: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| normal(&mut r)).collect()).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.5 + v[0] - 2.0 * v[1] + 0.25 * v[3]).collect();
    let m = fit(RegressorKind::LinearRegression, &x, &y, &MlHyperparams::default(), 0).unwrap();
    match m.params.unwrap() {
        ModelParams::Linear { intercept, coefs } => {
            assert!((intercept - 0.5).abs() < 1e-12);
            for (a, b) in coefs.iter().zip([1.0, -2.0, 0.0, 0.25]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        other => panic!("unexpected parameters {other:?}"),
    }
}

#[test]
fn unlimited_tree_interpolates_training_data() {
    let (x, y) = dataset(2, 120);
    let hyper = MlHyperparams {
        max_depth: None,
        min_samples_leaf: 1,
        ..Default::default()
    };
    assert_eq!(sse(RegressorKind::DecisionTree, &hyper, &x, &y), 0.0);
}

#[test]
fn single_tree_forest_without_bootstrap_is_the_tree() {
    let (x, y) = dataset(3, 150);
    let hyper = MlHyperparams {
        n_trees: 1,
        bootstrap: false,
        ..Default::default()
    };
    let dt = fit(RegressorKind::DecisionTree, &x, &y, &hyper, 5).unwrap();
    let rf = fit(RegressorKind::RandomForest, &x, &y, &hyper, 5).unwrap();
    for row in &x {
        assert_eq!(dt.predict(row).unwrap(), rf.predict(row).unwrap());
    }
}

#[test]
fn forest_predicts_the_mean_of_its_trees() {
    let (x, y) = dataset(4, 150);
    let m = fit(RegressorKind::RandomForest, &x, &y, &MlHyperparams::default(), 9).unwrap();
    let trees = match m.params.as_ref().unwrap() {
        ModelParams::Forest { trees } => trees.clone(),
        other => panic!("unexpected parameters {other:?}"),
    };
    assert_eq!(trees.len(), 30);
    for row in x.iter().take(20) {
        let mean = trees.iter().map(|t| t.predict(row)).sum::<f64>() / 30.0;
        assert!((m.predict(row).unwrap() - mean).abs() < 1e-15);
        assert!(trees.iter().all(|t| t.depth() <= 8));
    }
    let again = fit(RegressorKind::RandomForest, &x, &y, &MlHyperparams::default(), 9).unwrap();
    assert_eq!(m, again);
}

#[test]
fn svr_objective_trace_never_rises() {
    for seed in 0..5 {
        let (x, y) = dataset(10 + seed, 200);
        let m = fit(RegressorKind::LinearSvr, &x, &y, &MlHyperparams::default(), seed).unwrap();
        let trace = match m.params.unwrap() {
            ModelParams::Svr { trace, .. } => trace,
            other => panic!("unexpected parameters {other:?}"),
        };
        assert_eq!(trace.len(), 300);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn fitted_models_beat_the_mean_in_sample() {
    let (x, y) = dataset(20, 300);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    for kind in RegressorKind::ALL {
        let r2 = 1.0 - sse(kind, &MlHyperparams::default(), &x, &y) / sst;
        assert!(r2 >= 0.0, "{}: R^2 = {r2}", kind.name());
    }
}

#[test]
fn planted_alpha_is_tradable() {
    let panel = synthetic(10, 900, 0.02, 0);
    let features = FeatureTensor::compute(&panel, &IndicatorParams::default()).unwrap();
    let scaler = FeatureScaler::fit(&features, 61, 399);
    let (x, y) = training_samples(&panel, &features, &scaler, 62..=400).unwrap();
    let ctx = MarketContext {
        panel: &panel,
        features: &features,
        scaler: &scaler,
        window: 60,
        lambda: 300.0,
        solver: SolverOptions::default(),
    };
    let eq = backtest::run(&EqualWeight, &ctx, 401..=899).unwrap();
    let eq_sharpe = backtest::metrics(&eq, PERIODS_PER_YEAR, 0.0).unwrap().sharpe.unwrap();
    for kind in [RegressorKind::LinearRegression, RegressorKind::RandomForest] {
        let model = fit(kind, &x, &y, &MlHyperparams::default(), 0).unwrap();
        let strategy = MlStrategy {
            label: kind.name().into(),
            model,
        };
        let res = backtest::run(&strategy, &ctx, 401..=899).unwrap();
        let sharpe = backtest::metrics(&res, PERIODS_PER_YEAR, 0.0).unwrap().sharpe.unwrap();
        assert!(sharpe > eq_sharpe, "{}: {sharpe} vs {eq_sharpe}", kind.name());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tree_depth_and_leaf_size_are_respected(seed in any::<u64>(), depth in 1usize..6) {
        let (x, y) = dataset(seed, 80);
        let hyper = MlHyperparams { max_depth: Some(depth), min_samples_leaf: 5, ..Default::default() };
        let m = fit(RegressorKind::DecisionTree, &x, &y, &hyper, 0).unwrap();
        match m.params.unwrap() {
            ModelParams::Tree { tree } => prop_assert!(tree.depth() <= depth),
            _ => prop_assert!(false),
        }
    }
}

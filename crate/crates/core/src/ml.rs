//! Classical regression baselines and the forward-pass pipeline that turns
//! their return predictions into portfolio weights and feature weights.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{slot_features, FeatureScaler, FeatureTensor};
use crate::hindsight::{cross_sectional_ols, reference_feature_weights, QVector};
use crate::market_data::{price_relatives, CovEstimate, PricePanel};
use crate::mean_variance::{solve, MvProblem, PortfolioWeights, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    #[serde(rename = "lr")]
    LinearRegression,
    #[serde(rename = "dt")]
    DecisionTree,
    #[serde(rename = "rf")]
    RandomForest,
    #[serde(rename = "svm")]
    LinearSvr,
}

impl RegressorKind {
    pub const ALL: [RegressorKind; 4] = [
        RegressorKind::LinearRegression,
        RegressorKind::DecisionTree,
        RegressorKind::RandomForest,
        RegressorKind::LinearSvr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegressorKind::LinearRegression => "lr",
            RegressorKind::DecisionTree => "dt",
            RegressorKind::RandomForest => "rf",
            RegressorKind::LinearSvr => "svm",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlHyperparams {
    /// `None` grows trees until leaves are pure or hit `min_samples_leaf`.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub n_trees: usize,
    pub bootstrap: bool,
    /// Features tried per split; `None` means all.
    pub max_features: Option<usize>,
    pub svr_epsilon: f64,
    pub svr_c: f64,
    pub svr_epochs: usize,
    pub svr_lr: f64,
}

impl Default for MlHyperparams {
    fn default() -> Self {
        Self {
            max_depth: Some(8),
            min_samples_leaf: 10,
            n_trees: 30,
            bootstrap: true,
            max_features: None,
            svr_epsilon: 0.01,
            svr_c: 1.0,
            svr_epochs: 300,
            svr_lr: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// CART regression tree; `nodes[0]` is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ModelParams {
    Linear {
        intercept: f64,
        coefs: Vec<f64>,
    },
    Tree {
        tree: Tree,
    },
    Forest {
        trees: Vec<Tree>,
    },
    Svr {
        weights: Vec<f64>,
        bias: f64,
        x_mean: Vec<f64>,
        x_scale: Vec<f64>,
        y_mean: f64,
        y_scale: f64,
        /// Objective after each epoch.
        trace: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorModel {
    pub kind: RegressorKind,
    pub hyper: MlHyperparams,
    pub seed: u64,
    pub params: Option<ModelParams>,
}

impl RegressorModel {
    pub fn new(kind: RegressorKind, hyper: MlHyperparams, seed: u64) -> Self {
        Self {
            kind,
            hyper,
            seed,
            params: None,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let params = self.params.as_ref().ok_or(Error::ModelNotFitted)?;
        Ok(match params {
            ModelParams::Linear { intercept, coefs } => {
                intercept + coefs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
            }
            ModelParams::Tree { tree } => tree.predict(x),
            ModelParams::Forest { trees } => {
                trees.iter().map(|t| t.predict(x)).sum::<f64>() / trees.len() as f64
            }
            ModelParams::Svr {
                weights,
                bias,
                x_mean,
                x_scale,
                y_mean,
                y_scale,
                ..
            } => {
                let z: f64 = (0..weights.len())
                    .map(|j| weights[j] * (x[j] - x_mean[j]) / x_scale[j])
                    .sum::<f64>()
                    + bias;
                y_mean + y_scale * z
            }
        })
    }
}

pub fn fit(
    kind: RegressorKind,
    x: &[Vec<f64>],
    y: &[f64],
    hyper: &MlHyperparams,
    seed: u64,
) -> Result<RegressorModel> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(Error::TooFewSamples(x.len().min(y.len())));
    }
    let k = x[0].len();
    if x.iter().any(|r| r.len() != k) {
        return Err(Error::ShapeMismatch("ragged design matrix".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let params = match kind {
        RegressorKind::LinearRegression => {
            let cols: Vec<Vec<f64>> = (0..k).map(|j| x.iter().map(|r| r[j]).collect()).collect();
            let f = cross_sectional_ols(y, &cols)?;
            ModelParams::Linear {
                intercept: f.intercept,
                coefs: f.coefs,
            }
        }
        RegressorKind::DecisionTree => {
            let idx: Vec<usize> = (0..x.len()).collect();
            ModelParams::Tree {
                tree: build_tree(x, y, idx, hyper, None::<&mut ChaCha8Rng>),
            }
        }
        RegressorKind::RandomForest => ModelParams::Forest {
            trees: (0..hyper.n_trees.max(1))
                .map(|b| {
                    let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(seed, b as u64));
                    let idx: Vec<usize> = if hyper.bootstrap {
                        (0..x.len()).map(|_| rng.random_range(0..x.len())).collect()
                    } else {
                        (0..x.len()).collect()
                    };
                    build_tree(x, y, idx, hyper, Some(&mut rng))
                })
                .collect(),
        },
        RegressorKind::LinearSvr => fit_svr(x, y, hyper)?,
    };
    Ok(RegressorModel {
        kind,
        hyper: hyper.clone(),
        seed,
        params: Some(params),
    })
}

/// Per-tree seed derived from the forest seed.
fn tree_seed(root: u64, b: u64) -> u64 {
    let mut s = crate::nn::SplitMix64::new(root ^ b.wrapping_mul(0xD134_2543_DE82_EF95));
    s.next_u64()
}

fn build_tree<R: Rng>(
    x: &[Vec<f64>],
    y: &[f64],
    idx: Vec<usize>,
    hyper: &MlHyperparams,
    mut rng: Option<&mut R>,
) -> Tree {
    let mut nodes = Vec::new();
    grow(x, y, idx, 0, hyper, &mut rng, &mut nodes);
    Tree { nodes }
}

fn grow<R: Rng>(
    x: &[Vec<f64>],
    y: &[f64],
    idx: Vec<usize>,
    depth: usize,
    hyper: &MlHyperparams,
    rng: &mut Option<&mut R>,
    nodes: &mut Vec<Node>,
) -> usize {
    let me = nodes.len();
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
    nodes.push(Node::Leaf { value: mean });

    let min_leaf = hyper.min_samples_leaf.max(1);
    let sse: f64 = idx.iter().map(|&i| (y[i] - mean).powi(2)).sum();
    if hyper.max_depth.is_some_and(|d| depth >= d) || idx.len() < 2 * min_leaf || sse <= 0.0 {
        return me;
    }

    let k = x[0].len();
    let candidates: Vec<usize> = match (hyper.max_features, rng.as_deref_mut()) {
        (Some(m), Some(r)) if m < k => {
            let mut c = sample_indices(r, k, m.max(1)).into_vec();
            c.sort_unstable();
            c
        }
        _ => (0..k).collect(),
    };

    let total: f64 = idx.iter().map(|&i| y[i]).sum();
    let total_sq: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
    let mut best: Option<(f64, usize, f64)> = None;
    let mut sorted = idx.clone();
    for &f in &candidates {
        sorted.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let (mut ls, mut lsq) = (0.0, 0.0);
        for pos in 0..sorted.len() - 1 {
            let i = sorted[pos];
            ls += y[i];
            lsq += y[i] * y[i];
            let nl = (pos + 1) as f64;
            let nr = n - nl;
            if pos + 1 < min_leaf || sorted.len() - pos - 1 < min_leaf {
                continue;
            }
            let (xv, xn) = (x[i][f], x[sorted[pos + 1]][f]);
            if xv == xn {
                continue;
            }
            let rs = total - ls;
            let rsq = total_sq - lsq;
            let child_sse = (lsq - ls * ls / nl) + (rsq - rs * rs / nr);
            if best.is_none_or(|(b, _, _)| child_sse < b) {
                best = Some((child_sse, f, 0.5 * (xv + xn)));
            }
        }
    }
    let Some((child_sse, feature, threshold)) = best else {
        return me;
    };
    if child_sse >= sse {
        return me;
    }
    let (li, ri): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| x[i][feature] <= threshold);
    let left = grow(x, y, li, depth + 1, hyper, rng, nodes);
    let right = grow(x, y, ri, depth + 1, hyper, rng, nodes);
    nodes[me] = Node::Split {
        feature,
        threshold,
        left,
        right,
    };
    me
}

/// Linear epsilon-insensitive SVR on standardized inputs and target:
/// `0.5 |w|^2 + C sum max(0, |y - w'x - b| - eps)`, minimized by full-batch
/// subgradient steps `lr / (C n sqrt(epoch + 1))`. A step that would raise the
/// objective is halved until it does not, so the trace never increases.
fn fit_svr(x: &[Vec<f64>], y: &[f64], hyper: &MlHyperparams) -> Result<ModelParams> {
    let n = x.len();
    let k = x[0].len();
    let nf = n as f64;
    let y_mean = y.iter().sum::<f64>() / nf;
    let y_scale = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / nf).sqrt();
    if !(y_scale > 1e-15) {
        return Err(Error::DegenerateTarget);
    }
    let x_mean: Vec<f64> = (0..k).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let x_scale: Vec<f64> = (0..k)
        .map(|j| {
            let s = (x.iter().map(|r| (r[j] - x_mean[j]).powi(2)).sum::<f64>() / nf).sqrt();
            if s > 1e-15 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let xs: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..k).map(|j| (r[j] - x_mean[j]) / x_scale[j]).collect())
        .collect();
    let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
    let (eps, c) = (hyper.svr_epsilon, hyper.svr_c);

    let objective = |w: &[f64], b: f64| -> f64 {
        let reg = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
        let loss: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(r, t)| {
                let p = b + r.iter().zip(w).map(|(a, v)| a * v).sum::<f64>();
                ((t - p).abs() - eps).max(0.0)
            })
            .sum();
        reg + c * loss
    };

    let mut w = vec![0.0; k];
    let mut b = 0.0;
    let mut current = objective(&w, b);
    let mut trace = Vec::with_capacity(hyper.svr_epochs);
    let mut base = hyper.svr_lr;
    for epoch in 0..hyper.svr_epochs {
        let mut gw = w.clone();
        let mut gb = 0.0;
        for (r, t) in xs.iter().zip(&ys) {
            let resid = t - b - r.iter().zip(&w).map(|(a, v)| a * v).sum::<f64>();
            if resid.abs() > eps {
                let s = resid.signum();
                for (g, a) in gw.iter_mut().zip(r) {
                    *g -= c * s * a;
                }
                gb -= c * s;
            }
        }
        let mut accepted = false;
        for _ in 0..40 {
            let step = base / (c * nf * ((epoch + 1) as f64).sqrt());
            let cw: Vec<f64> = w.iter().zip(&gw).map(|(v, g)| v - step * g).collect();
            let cb = b - step * gb;
            let cand = objective(&cw, cb);
            if cand <= current {
                w = cw;
                b = cb;
                current = cand;
                accepted = true;
                break;
            }
            base *= 0.5;
        }
        trace.push(current);
        if !accepted {
            break;
        }
    }
    Ok(ModelParams::Svr {
        weights: w,
        bias: b,
        x_mean,
        x_scale,
        y_mean,
        y_scale,
        trace,
    })
}

/// Pooled training set: one sample per (slot, asset), features known at the
/// start of the slot, target the slot's realized price relative.
pub fn training_samples(
    panel: &PricePanel,
    features: &FeatureTensor,
    scaler: &FeatureScaler,
    slots: std::ops::RangeInclusive<usize>,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in slots {
        let f = slot_features(features, scaler, t)?;
        let y = price_relatives(panel, t)?;
        for (i, yi) in y.values.iter().enumerate() {
            xs.push(f.iter().map(|col| col[i]).collect());
            ys.push(*yi);
        }
    }
    Ok((xs, ys))
}

/// `y_hat(t)` from the slot's `[k][asset]` feature cross-sections.
pub fn predict_returns(model: &RegressorModel, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = features.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let x: Vec<f64> = features.iter().map(|col| col[i]).collect();
            model.predict(&x)
        })
        .collect()
}

pub fn ml_strategy_weights(
    model: &RegressorModel,
    features: &[Vec<f64>],
    cov: &CovEstimate,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<PortfolioWeights> {
    let y_hat = predict_returns(model, features)?;
    let problem = MvProblem::new(y_hat, cov.matrix.clone(), lambda)?;
    Ok(PortfolioWeights {
        slot: cov.slot,
        values: solve(&problem, opts).weights,
    })
}

/// `b(t)`: cross-sectional regression of `q*(t)` on the features, each
/// coefficient times its feature's cross-sectional sum.
pub fn ml_feature_weights(q: &QVector, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let fit = cross_sectional_ols(&q.values, features)?;
    Ok(reference_feature_weights(&fit, features))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stump_splits_at_midpoint() {
        let x: Vec<Vec<f64>> = [0.0, 0.1, 0.2, 1.0, 1.1, 1.2].iter().map(|v| vec![*v]).collect();
        let y = vec![1.0, 1.0, 1.0, 3.0, 3.0, 3.0];
        let hyper = MlHyperparams {
            max_depth: Some(1),
            min_samples_leaf: 1,
            ..Default::default()
        };
        let m = fit(RegressorKind::DecisionTree, &x, &y, &hyper, 0).unwrap();
        let Some(ModelParams::Tree { tree }) = &m.params else {
            panic!()
        };
        match &tree.nodes[0] {
            Node::Split { threshold, .. } => assert!((threshold - 0.6).abs() < 1e-15),
            n => panic!("{n:?}"),
        }
        assert_eq!(m.predict(&[0.05]).unwrap(), 1.0);
        assert_eq!(m.predict(&[5.0]).unwrap(), 3.0);
    }

    #[test]
    fn constant_leaf_predicts_constant() {
        let m = RegressorModel {
            params: Some(ModelParams::Tree {
                tree: Tree {
                    nodes: vec![Node::Leaf { value: 1.01 }],
                },
            }),
            ..RegressorModel::new(RegressorKind::DecisionTree, MlHyperparams::default(), 0)
        };
        let f = vec![vec![0.1, 0.5, 0.9]; 4];
        assert_eq!(predict_returns(&m, &f).unwrap(), vec![1.01; 3]);
    }

    #[test]
    fn unfitted_and_degenerate() {
        let m = RegressorModel::new(RegressorKind::LinearSvr, MlHyperparams::default(), 0);
        assert!(matches!(m.predict(&[1.0]), Err(Error::ModelNotFitted)));
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert!(matches!(
            fit(RegressorKind::LinearSvr, &x, &[1.0; 3], &MlHyperparams::default(), 0),
            Err(Error::DegenerateTarget)
        ));
        assert!(matches!(
            fit(RegressorKind::LinearRegression, &x[..1], &[1.0], &MlHyperparams::default(), 0),
            Err(Error::TooFewSamples(1))
        ));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in RegressorKind::ALL {
            assert_eq!(RegressorKind::from_name(k.name()), Some(k));
        }
    }
}

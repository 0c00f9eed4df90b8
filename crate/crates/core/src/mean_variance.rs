//! Long-only, fully-invested mean-variance allocation.
//!
//! Maximizes `w'mu - lambda * w'Sigma w` over the probability simplex with
//! projected gradient ascent and a backtracking line search.

use std::cmp::Ordering;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{CovEstimate, RelativeVector};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Inputs closer than this to the simplex are returned unchanged by
/// [`project_simplex`], which makes the projection exactly idempotent.
const FEASIBLE_SLACK: f64 = 1e-12;
const MAX_STEP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioWeights {
    pub slot: usize,
    pub values: Vec<f64>,
}

impl PortfolioWeights {
    pub fn equal(n: usize, slot: usize) -> Self {
        Self {
            slot,
            values: vec![1.0 / n as f64; n],
        }
    }

    pub fn check(&self) -> Result<()> {
        check_simplex(&self.values, SIMPLEX_TOL)
    }
}

pub fn check_simplex(w: &[f64], tol: f64) -> Result<()> {
    let sum: f64 = w.iter().sum();
    let min = w.iter().copied().fold(f64::INFINITY, f64::min);
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if w.is_empty() || (sum - 1.0).abs() > tol || min < -tol || max > 1.0 + tol || !sum.is_finite()
    {
        return Err(Error::NotOnSimplex { sum, min });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MvProblem {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub lambda: f64,
}

impl MvProblem {
    pub fn new(mu: Vec<f64>, sigma: DMatrix<f64>, lambda: f64) -> Result<Self> {
        let n = mu.len();
        if n == 0 || sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::InvalidProblem(format!(
                "mu has {n} entries, sigma is {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidProblem(format!("lambda must be > 0, got {lambda}")));
        }
        if mu.iter().chain(sigma.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self {
            mu: DVector::from_vec(mu),
            sigma,
            lambda,
        })
    }

    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        w.dot(&self.mu) - self.lambda * (w.transpose() * &self.sigma * w)[(0, 0)]
    }

    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.mu - (&self.sigma * w) * (2.0 * self.lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MvSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// False when `max_iters` was hit; `weights` is then the best iterate.
    pub converged: bool,
}

/// Euclidean projection onto `{w : sum w = 1, w >= 0}` (sort and threshold).
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let sum: f64 = v.iter().sum();
    if v.iter().all(|x| *x >= 0.0) && (sum - 1.0).abs() <= FEASIBLE_SLACK {
        return Ok(v.to_vec());
    }
    // The projection commutes with a common shift; centring on the max keeps
    // the threshold arithmetic well conditioned for large inputs.
    let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = v.iter().map(|x| x - top).collect();
    let mut u = shifted.clone();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    Ok(shifted.iter().map(|x| (x - theta).max(0.0)).collect())
}

fn project(v: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(project_simplex(v.as_slice()).expect("finite iterate"))
}

pub fn solve(problem: &MvProblem, opts: &SolverOptions) -> MvSolution {
    let n = problem.mu.len();
    let mut w = DVector::from_element(n, 1.0 / n as f64);
    let mut f = problem.objective(&w);

    // Lipschitz bound of the gradient: 2 lambda ||Sigma||_F.
    let lip = 2.0 * problem.lambda * problem.sigma.norm();
    let mut step = if lip > 0.0 { (1.0 / lip).min(MAX_STEP) } else { MAX_STEP };

    for iter in 0..opts.max_iters {
        let g = problem.gradient(&w);
        let pg = (&w - project(&(&w + &g))).norm();
        if pg < opts.tol {
            return MvSolution {
                weights: w.as_slice().to_vec(),
                objective: f,
                iterations: iter,
                converged: true,
            };
        }
        // The objective is quadratic, so the sufficient-increase test
        // f(w+d) >= f(w) + g'd - |d|^2/(2 step) reduces to a curvature bound
        // that does not cancel near the optimum.
        loop {
            let cand = project(&(&w + &g * step));
            let d = &cand - &w;
            let curvature = problem.lambda * (d.transpose() * &problem.sigma * &d)[(0, 0)];
            if curvature <= d.norm_squared() / (2.0 * step) || step < 1e-300 {
                w = cand;
                f = problem.objective(&w);
                break;
            }
            step *= 0.5;
        }
        step = (step * 2.0).min(MAX_STEP);
    }
    warn!("mean-variance solver hit max_iters={}", opts.max_iters);
    MvSolution {
        weights: w.as_slice().to_vec(),
        objective: f,
        iterations: opts.max_iters,
        converged: false,
    }
}

/// Weights of the hindsight investor: realized relatives as the mean and the
/// realized covariance.
pub fn hindsight_weights(
    y: &RelativeVector,
    sigma_true: &CovEstimate,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<PortfolioWeights> {
    let problem = MvProblem::new(y.values.clone(), sigma_true.matrix.clone(), lambda)?;
    let sol = solve(&problem, opts);
    Ok(PortfolioWeights {
        slot: y.slot,
        values: sol.weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_fixed_points() {
        let third = vec![1.0 / 3.0; 3];
        assert_eq!(project_simplex(&third).unwrap(), third);
        let p = project_simplex(&[0.5, 0.5, 0.5]).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(project_simplex(&[f64::NAN]), Err(Error::NonFiniteInput)));
        assert_eq!(project_simplex(&[1e12, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn symmetric_problem_gives_equal_weights() {
        for lambda in [1e-6, 0.5, 10.0] {
            let p = MvProblem::new(vec![1.1; 3], DMatrix::identity(3, 3), lambda).unwrap();
            let s = solve(&p, &SolverOptions::default());
            assert!(s.converged);
            for w in &s.weights {
                assert!((w - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_lambda_picks_argmax() {
        let p = MvProblem::new(vec![1.0, 1.2, 0.9], DMatrix::identity(3, 3), 1e-12).unwrap();
        let s = solve(&p, &SolverOptions::default());
        assert_eq!(s.weights, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_problems() {
        assert!(MvProblem::new(vec![1.0], DMatrix::identity(1, 1), 0.0).is_err());
        assert!(MvProblem::new(vec![1.0, 1.0], DMatrix::identity(1, 1), 0.5).is_err());
        assert!(matches!(
            MvProblem::new(vec![f64::INFINITY], DMatrix::identity(1, 1), 0.5),
            Err(Error::NonFiniteInput)
        ));
    }

    #[test]
    fn hindsight_winner_and_symmetry() {
        let cov = CovEstimate {
            slot: 3,
            matrix: DMatrix::identity(3, 3) * 1e-4,
            window: 10,
            conditioned: false,
        };
        let y = RelativeVector {
            slot: 3,
            values: vec![1.0, 1.5, 1.0],
        };
        let w = hindsight_weights(&y, &cov, 1e-12, &SolverOptions::default()).unwrap();
        assert_eq!(w.values, vec![0.0, 1.0, 0.0]);
        let y = RelativeVector {
            slot: 3,
            values: vec![1.02; 3],
        };
        let w = hindsight_weights(&y, &cov, 0.5, &SolverOptions::default()).unwrap();
        for x in w.values {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_iters_flags_nonconvergence() {
        let p = MvProblem::new(vec![1.0, 1.01, 0.99], DMatrix::identity(3, 3), 5.0).unwrap();
        let s = solve(&p, &SolverOptions { tol: 0.0, max_iters: 3 });
        assert!(!s.converged);
        check_simplex(&s.weights, SIMPLEX_TOL).unwrap();
    }
}

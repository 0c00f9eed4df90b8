//! Explaining portfolio strategies against a linear model in hindsight.
//!
//! The crate trains small actor-critic agents and classical regressors on a
//! price panel, attributes their decisions to technical-indicator features
//! (integrated gradients for the agents, cross-sectional regression for the
//! regressors) and measures how well those feature weights line up with the
//! reference weights of an investor who knew realized returns in advance.
//!
//! - [`market_data`]: panel loading, price relatives, rolling covariance
//! - [`features`]: MACD/RSI/CCI/ADX and the agent state matrix
//! - [`mean_variance`]: simplex-constrained mean-variance solver
//! - [`hindsight`]: hindsight regression and reference feature weights
//! - [`nn`]: dense networks with reverse-mode gradients
//! - [`rl`]: portfolio environment, A2C and PPO
//! - [`ml`]: linear regression, CART, random forest, linear SVR
//! - [`attribution`]: integrated gradients, correlations, Z tests
//! - [`backtest`]: walk-forward evaluation and performance metrics
//! - [`synthetic`]: market generator with a planted feature alpha

pub mod attribution;
pub mod backtest;
pub mod error;
pub mod features;
pub mod hindsight;
pub mod market_data;
pub mod mean_variance;
pub mod ml;
pub mod nn;
pub mod rl;
pub mod synthetic;

pub use error::{Error, ErrorClass, Result};

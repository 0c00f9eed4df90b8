#![allow(dead_code)]

use chrono::NaiveDate;
use hindsight_core::market_data::PricePanel;
use hindsight_core::synthetic::{business_days, generate, SyntheticConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn synthetic(n: usize, days: usize, alpha: f64, seed: u64) -> PricePanel {
    generate(&SyntheticConfig {
        n_assets: n,
        n_days: days,
        alpha,
        seed,
        ..Default::default()
    })
    .unwrap()
    .panel
}

/// Panel from close paths; open = close, high/low bracket the close by 1%.
pub fn panel_from_closes(close: Vec<Vec<f64>>) -> PricePanel {
    let n = close.len();
    let days = close[0].len();
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    PricePanel::from_parts(
        (0..n).map(|i| format!("A{i}")).collect(),
        business_days(start, days),
        close.clone(),
        close.iter().map(|r| r.iter().map(|c| c * 1.01).collect()).collect(),
        close.iter().map(|r| r.iter().map(|c| c * 0.99).collect()).collect(),
        close,
        vec![vec![1000.0; days]; n],
    )
    .unwrap()
}

pub fn random_walks(rng: &mut ChaCha8Rng, n: usize, days: usize, sigma: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut c = vec![20.0 + 80.0 * rng.random::<f64>()];
            for t in 1..days {
                let prev = c[t - 1];
                c.push(prev * (sigma * normal(rng)).exp());
            }
            c
        })
        .collect()
}

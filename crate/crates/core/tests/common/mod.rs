#![allow(dead_code)]

use std::sync::Arc;

use affinity_xrl::discretize::maturity_bin_at;
use affinity_xrl::env::{ActionVector, AssetClass, EnvConfig, InvestEnv, MarketData, Trajectory};
use affinity_xrl::market_data::{
    synth_series, IndicatorParams, IndicatorSeries, PriceSeries, YearMonth,
};

pub fn start() -> YearMonth {
    YearMonth::new(1991, 11).unwrap()
}

fn indicators(series: &PriceSeries) -> IndicatorSeries {
    IndicatorSeries::compute(series, &IndicatorParams::default()).unwrap()
}

fn flat(name: &str, months: usize, level: f64) -> PriceSeries {
    let dates = (0..months).map(|i| start().add_months(i as i64)).collect();
    PriceSeries::new(name, dates, vec![level; months]).unwrap()
}

/// Every class earns nothing: flat prices and a vanishing interest rate.
pub fn flat_market(horizon: usize) -> Arc<MarketData> {
    let months = horizon + IndicatorParams::default().warm_up();
    Arc::new(
        MarketData::new(
            indicators(&flat("stocks", months, 100.0)),
            indicators(&flat("property", months, 100.0)),
            indicators(&flat("rate", months, 1e-300)),
            &flat("luxury", months, 100.0),
        )
        .unwrap(),
    )
}

/// Seeded random walks with the default regimes.
pub fn synthetic_market(horizon: usize, seed: u64) -> Arc<MarketData> {
    let months = (horizon + IndicatorParams::default().warm_up()).max(40);
    let walk = |name: &str, k: u64, p0: f64, drift: f64, vol: f64| {
        synth_series(name, start(), seed * 16 + k, months, p0, drift, vol).unwrap()
    };
    Arc::new(
        MarketData::new(
            indicators(&walk("stocks", 1, 100.0, 0.006, 0.04)),
            indicators(&walk("property", 2, 100.0, 0.004, 0.015)),
            indicators(&walk("rate", 3, 2.0, 0.0, 0.03)),
            &walk("luxury", 4, 100.0, 0.004, 0.03),
        )
        .unwrap(),
    )
}

pub fn env(data: &Arc<MarketData>, horizon: usize) -> InvestEnv {
    InvestEnv::new(
        EnvConfig {
            horizon,
            ..EnvConfig::default()
        },
        Arc::clone(data),
    )
    .unwrap()
}

/// A policy that looks only at the calendar: one allocation per maturity year.
pub fn maturity_only_trajectory(env: &mut InvestEnv, maturity_bins: usize) -> Trajectory {
    let horizon = env.horizon();
    let mut state = env.reset();
    let mut traj = Trajectory {
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    for t in 0..horizon {
        let year = maturity_bin_at(t, horizon, maturity_bins);
        let action = match year % 3 {
            0 => ActionVector::one_hot(AssetClass::ALL[year % 5]),
            1 => ActionVector::uniform(),
            _ => ActionVector([0.5, 0.0, 0.5, 0.0, 0.0]),
        };
        traj.states.push(state);
        traj.actions.push(action);
        if t + 1 < horizon {
            let out = env.step(&action).unwrap();
            traj.rewards.push(out.reward);
            state = out.state;
        }
    }
    traj
}

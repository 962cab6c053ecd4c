//! The investment MDP: five purchase-only asset classes funded by a fixed
//! monthly contribution, observed through market indicators and portfolio
//! maturity.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{IndicatorSeries, PriceSeries, YearMonth};

pub const NUM_ASSETS: usize = 5;
pub const NUM_FEATURES: usize = 7;

/// Tolerance within which an action is renormalized onto the simplex.
pub const SIMPLEX_SLACK: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("indicator series are not aligned: {0}")]
    MisalignedSeries(String),
    #[error("horizon of {horizon} months exceeds the {available} months of data")]
    HorizonExceedsData { horizon: usize, available: usize },
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("action is off the simplex (sum {sum}, min {min})")]
    ActionOffSimplex { sum: f64, min: f64 },
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetClass {
    Savings,
    Property,
    Stocks,
    Mortgage,
    Luxury,
}

impl AssetClass {
    /// Fixed order: action component `j` always refers to `ALL[j]`.
    pub const ALL: [AssetClass; NUM_ASSETS] = [
        AssetClass::Savings,
        AssetClass::Property,
        AssetClass::Stocks,
        AssetClass::Mortgage,
        AssetClass::Luxury,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AssetClass::Savings => "savings",
            AssetClass::Property => "property",
            AssetClass::Stocks => "stocks",
            AssetClass::Mortgage => "mortgage",
            AssetClass::Luxury => "luxury",
        }
    }
}

impl fmt::Display for AssetClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Monthly allocation of the contribution across the five classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionVector(pub [f64; NUM_ASSETS]);

impl ActionVector {
    pub fn uniform() -> Self {
        Self([1.0 / NUM_ASSETS as f64; NUM_ASSETS])
    }

    pub fn one_hot(class: AssetClass) -> Self {
        let mut w = [0.0; NUM_ASSETS];
        w[class as usize] = 1.0;
        Self(w)
    }

    pub fn weights(&self) -> &[f64; NUM_ASSETS] {
        &self.0
    }

    /// Accepts vectors within `SIMPLEX_SLACK` of the simplex and rescales them onto it.
    pub fn checked(weights: [f64; NUM_ASSETS]) -> Result<Self, EnvError> {
        let sum: f64 = weights.iter().sum();
        let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
        if !sum.is_finite() || min < 0.0 || (sum - 1.0).abs() > SIMPLEX_SLACK {
            return Err(EnvError::ActionOffSimplex { sum, min });
        }
        Ok(Self(weights.map(|w| w / sum)))
    }

    pub fn is_on_simplex(&self, tol: f64) -> bool {
        self.0.iter().all(|&w| w >= 0.0) && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// Continuous observation: three indicator pairs plus maturity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub features: [f64; NUM_FEATURES],
    pub t: usize,
}

impl EnvState {
    pub const MACD_STOCKS: usize = 0;
    pub const RSI_STOCKS: usize = 1;
    pub const MACD_PROPERTY: usize = 2;
    pub const RSI_PROPERTY: usize = 3;
    pub const MACD_RATE: usize = 4;
    pub const RSI_RATE: usize = 5;
    pub const MATURITY: usize = 6;

    pub fn maturity(&self) -> f64 {
        self.features[Self::MATURITY]
    }
}

/// Aligned market inputs for the environment. The rate index is quoted in
/// percent per annum; the luxury index is a price level.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketData {
    pub dates: Vec<YearMonth>,
    pub stocks: IndicatorSeries,
    pub property: IndicatorSeries,
    pub rate: IndicatorSeries,
    pub luxury: Vec<f64>,
}

impl MarketData {
    pub fn new(
        stocks: IndicatorSeries,
        property: IndicatorSeries,
        rate: IndicatorSeries,
        luxury: &PriceSeries,
    ) -> Result<Self, EnvError> {
        for other in [&property, &rate] {
            if other.dates != stocks.dates {
                return Err(EnvError::MisalignedSeries(format!(
                    "{} and {} cover different months",
                    stocks.index_name, other.index_name
                )));
            }
        }
        let first = *stocks
            .dates
            .first()
            .ok_or_else(|| EnvError::MisalignedSeries("empty indicator series".into()))?;
        let offset = luxury
            .dates
            .iter()
            .position(|&d| d == first)
            .ok_or_else(|| {
                EnvError::MisalignedSeries(format!("luxury series does not contain {first}"))
            })?;
        if luxury.len() - offset < stocks.len() {
            return Err(EnvError::MisalignedSeries(
                "luxury series ends before the indicator window".into(),
            ));
        }
        let luxury = luxury.prices[offset..offset + stocks.len()].to_vec();
        Ok(Self {
            dates: stocks.dates.clone(),
            stocks,
            property,
            rate,
            luxury,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub monthly_contribution: f64,
    pub horizon: usize,
    /// Annual spread over the interest index earned by mortgage curtailment.
    pub mortgage_spread: f64,
    pub initial_holdings: [f64; NUM_ASSETS],
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            monthly_contribution: 1.0,
            horizon: 336,
            mortgage_spread: 0.015,
            initial_holdings: [1.0; NUM_ASSETS],
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.horizon < 2 {
            return Err(EnvError::InvalidConfig("horizon must be at least 2".into()));
        }
        if !(self.monthly_contribution > 0.0) {
            return Err(EnvError::InvalidConfig(
                "monthly_contribution must be positive".into(),
            ));
        }
        if self.initial_holdings.iter().any(|&h| !(h >= 0.0))
            || self.initial_holdings.iter().sum::<f64>() <= 0.0
        {
            return Err(EnvError::InvalidConfig(
                "initial_holdings must be non-negative with a positive total".into(),
            ));
        }
        Ok(())
    }
}

/// Per-class returns earned between month `t` and `t + 1`, in `AssetClass::ALL` order.
pub fn class_returns(data: &MarketData, config: &EnvConfig, t: usize) -> [f64; NUM_ASSETS] {
    let rel = |p: &[f64]| p[t + 1] / p[t] - 1.0;
    let annual_rate = data.rate.prices[t] / 100.0;
    [
        annual_rate / 12.0,
        rel(&data.property.prices),
        rel(&data.stocks.prices),
        (annual_rate + config.mortgage_spread) / 12.0,
        rel(&data.luxury),
    ]
}

/// Holdings per class in currency units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub holdings: [f64; NUM_ASSETS],
    pub t: usize,
}

impl Portfolio {
    pub fn value(&self) -> f64 {
        self.holdings.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct InvestEnv {
    config: EnvConfig,
    data: Arc<MarketData>,
    portfolio: Portfolio,
    done: bool,
}

impl InvestEnv {
    pub fn new(config: EnvConfig, data: Arc<MarketData>) -> Result<Self, EnvError> {
        config.validate()?;
        if config.horizon > data.len() {
            return Err(EnvError::HorizonExceedsData {
                horizon: config.horizon,
                available: data.len(),
            });
        }
        let portfolio = Portfolio {
            holdings: config.initial_holdings,
            t: 0,
        };
        Ok(Self {
            config,
            data,
            portfolio,
            done: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn data(&self) -> &Arc<MarketData> {
        &self.data
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn portfolio(&self) -> &Portfolio {
        &self.portfolio
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self) -> EnvState {
        self.portfolio = Portfolio {
            holdings: self.config.initial_holdings,
            t: 0,
        };
        self.done = false;
        self.state_at(0)
    }

    /// Observation at month `t`; depends only on market data and the clock.
    pub fn state_at(&self, t: usize) -> EnvState {
        let d = &*self.data;
        let maturity = t as f64 / (self.config.horizon - 1) as f64;
        EnvState {
            features: [
                d.stocks.macd[t],
                d.stocks.rsi[t],
                d.property.macd[t],
                d.property.rsi[t],
                d.rate.macd[t],
                d.rate.rsi[t],
                maturity,
            ],
            t,
        }
    }

    /// All observations of an episode, months `0..horizon`.
    pub fn all_states(&self) -> Vec<EnvState> {
        (0..self.config.horizon).map(|t| self.state_at(t)).collect()
    }

    pub fn step(&mut self, action: &ActionVector) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let action = ActionVector::checked(action.0)?;
        let t = self.portfolio.t;
        let returns = class_returns(&self.data, &self.config, t);
        let before = self.portfolio.value();
        let c = self.config.monthly_contribution;
        for j in 0..NUM_ASSETS {
            self.portfolio.holdings[j] =
                self.portfolio.holdings[j] * (1.0 + returns[j]) + c * action.0[j];
        }
        self.portfolio.t = t + 1;
        let after = self.portfolio.value();
        let reward = (after - before - c) / before;
        self.done = t + 1 == self.config.horizon - 1;
        Ok(StepOutcome {
            state: self.state_at(t + 1),
            reward,
            done: self.done,
        })
    }
}

/// A full-horizon rollout: one state and action per month, one reward per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<EnvState>,
    pub actions: Vec<ActionVector>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "t,maturity,macd_s,rsi_s,macd_p,rsi_p,macd_r,rsi_r,a_savings,a_property,a_stocks,a_mortgage,a_luxury,reward\n",
        );
        for (i, (s, a)) in self.states.iter().zip(&self.actions).enumerate() {
            let f = &s.features;
            out.push_str(&format!("{},{:.9e}", s.t, f[EnvState::MATURITY]));
            for x in &f[..6] {
                out.push_str(&format!(",{x:.9e}"));
            }
            for w in &a.0 {
                out.push_str(&format!(",{w:.9e}"));
            }
            match self.rewards.get(i) {
                Some(r) => out.push_str(&format!(",{r:.9e}\n")),
                None => out.push_str(",\n"),
            }
        }
        out
    }
}

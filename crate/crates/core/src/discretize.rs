//! Binning of continuous observations and allocations into the finite state
//! and symbol alphabets used by the Markov surrogates.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ActionVector, EnvState, Trajectory, NUM_ASSETS};

#[derive(Debug, Error, PartialEq)]
pub enum DiscretizeError {
    #[error("invalid action symbol {0}")]
    InvalidSymbol(u32),
    #[error("invalid state code {0}")]
    InvalidStateCode(usize),
    #[error("invalid bin spec: {0}")]
    InvalidSpec(String),
}

/// Which market index an indicator is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Stocks,
    Property,
    Rate,
}

impl IndexKind {
    fn macd_feature(self) -> usize {
        match self {
            IndexKind::Stocks => EnvState::MACD_STOCKS,
            IndexKind::Property => EnvState::MACD_PROPERTY,
            IndexKind::Rate => EnvState::MACD_RATE,
        }
    }

    fn rsi_feature(self) -> usize {
        match self {
            IndexKind::Stocks => EnvState::RSI_STOCKS,
            IndexKind::Property => EnvState::RSI_PROPERTY,
            IndexKind::Rate => EnvState::RSI_RATE,
        }
    }
}

/// The three discrete state features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateFeature {
    Macd,
    Rsi,
    Maturity,
}

impl StateFeature {
    pub const ALL: [StateFeature; 3] = [
        StateFeature::Macd,
        StateFeature::Rsi,
        StateFeature::Maturity,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StateFeature::Macd => "macd",
            StateFeature::Rsi => "rsi",
            StateFeature::Maturity => "maturity",
        }
    }
}

impl fmt::Display for StateFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinSpec {
    pub rsi_edges: Vec<f64>,
    pub macd_edges: Vec<f64>,
    pub maturity_bins: usize,
    pub action_bins: usize,
    pub macd_source: IndexKind,
    pub rsi_source: IndexKind,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            rsi_edges: vec![0.3, 0.7],
            macd_edges: vec![0.0],
            maturity_bins: 28,
            action_bins: 5,
            macd_source: IndexKind::Property,
            rsi_source: IndexKind::Stocks,
        }
    }
}

impl BinSpec {
    pub fn validate(&self) -> Result<(), DiscretizeError> {
        let increasing =
            |e: &[f64]| e.windows(2).all(|w| w[0] < w[1]) && e.iter().all(|x| x.is_finite());
        if !increasing(&self.rsi_edges) || self.rsi_edges.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return Err(DiscretizeError::InvalidSpec(
                "rsi_edges must be strictly increasing inside (0, 1)".into(),
            ));
        }
        if !increasing(&self.macd_edges) {
            return Err(DiscretizeError::InvalidSpec(
                "macd_edges must be strictly increasing".into(),
            ));
        }
        if self.maturity_bins == 0 || self.action_bins == 0 {
            return Err(DiscretizeError::InvalidSpec(
                "bin counts must be positive".into(),
            ));
        }
        if (self.action_bins as u64).pow(NUM_ASSETS as u32) > u32::MAX as u64 {
            return Err(DiscretizeError::InvalidSpec("too many action bins".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout {
            n_macd: self.macd_edges.len() + 1,
            n_rsi: self.rsi_edges.len() + 1,
            n_maturity: self.maturity_bins,
        }
    }

    pub fn action_symbol_count(&self) -> u32 {
        (self.action_bins as u32).pow(NUM_ASSETS as u32)
    }

    /// The same spec with `feature` reduced to a single bin.
    pub fn collapsed(&self, feature: StateFeature) -> Self {
        let mut out = self.clone();
        match feature {
            StateFeature::Macd => out.macd_edges.clear(),
            StateFeature::Rsi => out.rsi_edges.clear(),
            StateFeature::Maturity => out.maturity_bins = 1,
        }
        out
    }

    /// The same spec with `feature` split into `bins` bins: equal-width for
    /// RSI and maturity, symmetric around zero for MACD (`bins` quantile-free
    /// edges at multiples of `macd_step`).
    pub fn with_bins(&self, feature: StateFeature, bins: usize, macd_step: f64) -> Self {
        let bins = bins.max(1);
        let mut out = self.clone();
        match feature {
            StateFeature::Macd => {
                let half = bins as f64 / 2.0;
                out.macd_edges = (1..bins).map(|k| (k as f64 - half) * macd_step).collect();
            }
            StateFeature::Rsi => out.rsi_edges = equal_width_edges(bins),
            StateFeature::Maturity => out.maturity_bins = bins,
        }
        out
    }
}

fn equal_width_edges(bins: usize) -> Vec<f64> {
    (1..bins).map(|k| k as f64 / bins as f64).collect()
}

/// Number of bins along each discrete state axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub n_macd: usize,
    pub n_rsi: usize,
    pub n_maturity: usize,
}

impl StateLayout {
    pub fn state_count(&self) -> usize {
        self.n_macd * self.n_rsi * self.n_maturity
    }

    pub fn code(&self, macd_bin: usize, rsi_bin: usize, maturity_bin: usize) -> usize {
        maturity_bin * (self.n_rsi * self.n_macd) + rsi_bin * self.n_macd + macd_bin
    }

    pub fn decode(&self, code: usize) -> Result<DiscreteState, DiscretizeError> {
        if code >= self.state_count() {
            return Err(DiscretizeError::InvalidStateCode(code));
        }
        let per_year = self.n_rsi * self.n_macd;
        Ok(DiscreteState {
            maturity_bin: code / per_year,
            rsi_bin: (code % per_year) / self.n_macd,
            macd_bin: code % self.n_macd,
            code,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscreteState {
    pub macd_bin: usize,
    pub rsi_bin: usize,
    pub maturity_bin: usize,
    pub code: usize,
}

impl fmt::Display for DiscreteState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "macd {} rsi {} year {}",
            self.macd_bin, self.rsi_bin, self.maturity_bin
        )
    }
}

/// Joint action symbol: one bin per asset class, packed mixed-radix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSymbol {
    pub bins: [u8; NUM_ASSETS],
    pub id: u32,
}

impl ActionSymbol {
    pub fn from_bins(bins: [u8; NUM_ASSETS], radix: usize) -> Self {
        let mut id = 0u32;
        for &b in bins.iter().rev() {
            id = id * radix as u32 + b as u32;
        }
        Self { bins, id }
    }

    pub fn from_id(id: u32, radix: usize) -> Result<Self, DiscretizeError> {
        if id >= (radix as u32).pow(NUM_ASSETS as u32) {
            return Err(DiscretizeError::InvalidSymbol(id));
        }
        let mut bins = [0u8; NUM_ASSETS];
        let mut rest = id;
        for b in bins.iter_mut() {
            *b = (rest % radix as u32) as u8;
            rest /= radix as u32;
        }
        Ok(Self { bins, id })
    }
}

/// Index of the half-open bin `[e_k, e_{k+1})` containing `x` after clamping
/// to `[lo, hi]`. Values equal to `hi` fall in the last bin.
pub fn bin_value(x: f64, edges: &[f64], lo: f64, hi: f64) -> usize {
    let x = x.clamp(lo, hi);
    edges.partition_point(|&e| e <= x)
}

fn equal_width_bin(x: f64, bins: usize) -> usize {
    bin_value(x, &equal_width_edges(bins), 0.0, 1.0).min(bins - 1)
}

/// Maturity bin of month `t` in a horizon of `horizon` months.
pub fn maturity_bin_at(t: usize, horizon: usize, bins: usize) -> usize {
    let maturity = if horizon > 1 {
        t as f64 / (horizon - 1) as f64
    } else {
        0.0
    };
    equal_width_bin(maturity, bins)
}

pub fn encode_state(state: &EnvState, spec: &BinSpec) -> DiscreteState {
    let f = &state.features;
    let macd_bin = bin_value(
        f[spec.macd_source.macd_feature()],
        &spec.macd_edges,
        f64::NEG_INFINITY,
        f64::INFINITY,
    );
    let rsi_bin = bin_value(f[spec.rsi_source.rsi_feature()], &spec.rsi_edges, 0.0, 1.0);
    let maturity_bin = equal_width_bin(state.maturity(), spec.maturity_bins);
    let layout = spec.layout();
    DiscreteState {
        macd_bin,
        rsi_bin,
        maturity_bin,
        code: layout.code(macd_bin, rsi_bin, maturity_bin),
    }
}

pub fn decode_state(code: usize, spec: &BinSpec) -> Result<DiscreteState, DiscretizeError> {
    spec.layout().decode(code)
}

/// Every potential state under `spec`, in code order.
pub fn enumerate_states(spec: &BinSpec) -> Vec<DiscreteState> {
    let layout = spec.layout();
    (0..layout.state_count())
        .map(|c| layout.decode(c).expect("code in range"))
        .collect()
}

pub fn encode_action(action: &ActionVector, spec: &BinSpec) -> ActionSymbol {
    let bins = action.0.map(|w| equal_width_bin(w, spec.action_bins) as u8);
    ActionSymbol::from_bins(bins, spec.action_bins)
}

/// Bin midpoints rescaled onto the simplex.
pub fn decode_action(
    symbol: &ActionSymbol,
    spec: &BinSpec,
) -> Result<ActionVector, DiscretizeError> {
    let n = spec.action_bins;
    if symbol.id >= spec.action_symbol_count() || symbol.bins.iter().any(|&b| b as usize >= n) {
        return Err(DiscretizeError::InvalidSymbol(symbol.id));
    }
    let mids = symbol.bins.map(|b| (b as f64 + 0.5) / n as f64);
    let sum: f64 = mids.iter().sum();
    Ok(ActionVector(mids.map(|m| m / sum)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub state: DiscreteState,
    pub action: ActionSymbol,
}

/// One discretized (state, action) pair per month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTrace {
    pub label: String,
    pub layout: StateLayout,
    pub action_bins: usize,
    pub steps: Vec<TraceStep>,
}

impl DiscreteTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn distinct_states(&self) -> usize {
        let mut codes: Vec<usize> = self.steps.iter().map(|s| s.state.code).collect();
        codes.sort_unstable();
        codes.dedup();
        codes.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("t,state_code,macd_bin,rsi_bin,maturity_bin,action_id,b0,b1,b2,b3,b4\n");
        for (t, s) in self.steps.iter().enumerate() {
            let b = s.action.bins;
            out.push_str(&format!(
                "{t},{},{},{},{},{},{},{},{},{},{}\n",
                s.state.code,
                s.state.macd_bin,
                s.state.rsi_bin,
                s.state.maturity_bin,
                s.action.id,
                b[0],
                b[1],
                b[2],
                b[3],
                b[4]
            ));
        }
        out
    }
}

pub fn discretize_trace(trajectory: &Trajectory, spec: &BinSpec, label: &str) -> DiscreteTrace {
    let steps = trajectory
        .states
        .iter()
        .zip(&trajectory.actions)
        .map(|(s, a)| TraceStep {
            state: encode_state(s, spec),
            action: encode_action(a, spec),
        })
        .collect();
    DiscreteTrace {
        label: label.to_string(),
        layout: spec.layout(),
        action_bins: spec.action_bins,
        steps,
    }
}

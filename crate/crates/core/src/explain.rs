//! Surrogate evaluation: open-loop fidelity, bin-perturbation saliency and
//! exports for plotting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretize::{
    decode_action, discretize_trace, BinSpec, DiscreteTrace, DiscretizeError, StateFeature,
};
use crate::env::{AssetClass, Trajectory, NUM_ASSETS};
use crate::markov::{fit_counts, MarkovError, MarkovSurrogate, RolloutMode};

#[derive(Debug, Error, PartialEq)]
pub enum ExplainError {
    #[error("surrogate horizon {surrogate} differs from trace length {trace}")]
    HorizonMismatch { surrogate: usize, trace: usize },
    #[error("no trajectories supplied")]
    NoTraces,
    #[error("sample mode needs at least one seed")]
    NoSeeds,
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub mode: RolloutMode,
    pub seeds: Vec<u64>,
    /// Fraction of months whose joint action symbol matches; mean over seeds in sample mode.
    pub exact_match: f64,
    /// Standard deviation over seeds (0 in greedy mode).
    pub exact_match_std: f64,
    pub component_match: [f64; NUM_ASSETS],
    /// Per-month exact matches of the first rollout.
    pub mask: Vec<bool>,
}

fn compare(rollout: &DiscreteTrace, trace: &DiscreteTrace) -> (Vec<bool>, [f64; NUM_ASSETS]) {
    let n = trace.len() as f64;
    let mut comp = [0.0; NUM_ASSETS];
    let mask = rollout
        .steps
        .iter()
        .zip(&trace.steps)
        .map(|(r, a)| {
            for j in 0..NUM_ASSETS {
                if r.action.bins[j] == a.action.bins[j] {
                    comp[j] += 1.0;
                }
            }
            r.action.id == a.action.id
        })
        .collect();
    (mask, comp.map(|c| c / n))
}

/// Rolls the surrogate out from its initial state and scores it against `trace`.
/// Sample mode averages over `seeds`; greedy mode ignores them.
pub fn fidelity(
    surrogate: &MarkovSurrogate,
    trace: &DiscreteTrace,
    mode: RolloutMode,
    seeds: &[u64],
) -> Result<FidelityReport, ExplainError> {
    if surrogate.horizon != trace.len() {
        return Err(ExplainError::HorizonMismatch {
            surrogate: surrogate.horizon,
            trace: trace.len(),
        });
    }
    let seeds: Vec<u64> = match mode {
        RolloutMode::Greedy => Vec::new(),
        RolloutMode::Sample if seeds.is_empty() => return Err(ExplainError::NoSeeds),
        RolloutMode::Sample => seeds.to_vec(),
    };
    let runs: Vec<u64> = if seeds.is_empty() {
        vec![0]
    } else {
        seeds.clone()
    };
    let mut rates = Vec::with_capacity(runs.len());
    let mut comp_sum = [0.0; NUM_ASSETS];
    let mut first_mask = None;
    for &seed in &runs {
        let rollout = surrogate.rollout(mode, seed, trace.len());
        let (mask, comp) = compare(&rollout, trace);
        rates.push(mask.iter().filter(|&&m| m).count() as f64 / trace.len() as f64);
        for j in 0..NUM_ASSETS {
            comp_sum[j] += comp[j];
        }
        first_mask.get_or_insert(mask);
    }
    let k = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / k;
    let std = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k).sqrt();
    Ok(FidelityReport {
        mode,
        seeds,
        exact_match: mean,
        exact_match_std: std,
        component_match: comp_sum.map(|c| c / k),
        mask: first_mask.unwrap_or_default(),
    })
}

/// Fits a pooled surrogate on `trajectories` under `spec` and returns the mean
/// fidelity against each of them, each rolled out from its own initial state.
pub fn fit_and_score(
    trajectories: &[Trajectory],
    spec: &BinSpec,
    mode: RolloutMode,
    seeds: &[u64],
) -> Result<f64, ExplainError> {
    if trajectories.is_empty() {
        return Err(ExplainError::NoTraces);
    }
    let mut traces: Vec<DiscreteTrace> = trajectories
        .iter()
        .map(|t| discretize_trace(t, spec, "agent"))
        .collect();
    // A canonical order keeps registry order, and with it greedy tie-breaking,
    // independent of how the caller listed the trajectories.
    traces.sort_by_cached_key(|t| t.to_csv());
    let mut surrogate = fit_counts(&traces, 0.0)?;
    let mut total = 0.0;
    for tr in &traces {
        surrogate.initial_code = tr.steps[0].state.code as u32;
        total += fidelity(&surrogate, tr, mode, seeds)?.exact_match;
    }
    Ok(total / traces.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSaliency {
    pub feature: StateFeature,
    pub baseline: f64,
    pub collapsed: f64,
    pub drop: f64,
    /// 1-based position in the ranking.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub mode: RolloutMode,
    pub baseline: f64,
    /// Sorted by drop, largest first; equal drops keep macd, rsi, maturity order.
    pub features: Vec<FeatureSaliency>,
}

impl SaliencyReport {
    /// Top-ranked feature, or `None` when no collapse costs any fidelity
    /// (for example a policy that never changes its action).
    pub fn most_salient(&self) -> Option<StateFeature> {
        self.features
            .first()
            .filter(|f| f.drop > 0.0)
            .map(|f| f.feature)
    }

    pub fn get(&self, feature: StateFeature) -> &FeatureSaliency {
        self.features
            .iter()
            .find(|f| f.feature == feature)
            .expect("all features are scored")
    }
}

/// Fidelity drop when each state feature in turn is collapsed to one bin.
pub fn saliency_by_perturbation(
    trajectories: &[Trajectory],
    base_spec: &BinSpec,
    mode: RolloutMode,
    seeds: &[u64],
) -> Result<SaliencyReport, ExplainError> {
    let baseline = fit_and_score(trajectories, base_spec, mode, seeds)?;
    let mut features = Vec::with_capacity(StateFeature::ALL.len());
    for feature in StateFeature::ALL {
        let collapsed = fit_and_score(trajectories, &base_spec.collapsed(feature), mode, seeds)?;
        features.push(FeatureSaliency {
            feature,
            baseline,
            collapsed,
            drop: baseline - collapsed,
            rank: 0,
        });
    }
    features.sort_by(|a, b| b.drop.total_cmp(&a.drop));
    for (i, f) in features.iter_mut().enumerate() {
        f.rank = i + 1;
    }
    Ok(SaliencyReport {
        mode,
        baseline,
        features,
    })
}

/// Fidelity as one feature's bin count varies. MACD edges are spaced by `macd_step`.
pub fn bin_count_sweep(
    trajectories: &[Trajectory],
    base_spec: &BinSpec,
    feature: StateFeature,
    bin_counts: &[usize],
    macd_step: f64,
    mode: RolloutMode,
    seeds: &[u64],
) -> Result<Vec<(usize, f64)>, ExplainError> {
    bin_counts
        .iter()
        .map(|&b| {
            Ok((
                b,
                fit_and_score(
                    trajectories,
                    &base_spec.with_bins(feature, b, macd_step),
                    mode,
                    seeds,
                )?,
            ))
        })
        .collect()
}

/// Graphviz view of the first `max_states` visited states and the
/// transitions among them with probability at least `min_prob`.
pub fn export_dot(surrogate: &MarkovSurrogate, max_states: usize, min_prob: f64) -> String {
    let n = surrogate.state_count().min(max_states.max(1));
    let mut out = String::from("digraph surrogate {\n    rankdir=LR;\n    node [shape=circle, style=filled, fillcolor=lightblue];\n");
    for i in 0..n {
        let s = surrogate.decode_index(i);
        let _ = writeln!(
            out,
            "    s{i} [label=\"{}\\nmacd {} rsi {}\\nyear {}\"];",
            s.code, s.macd_bin, s.rsi_bin, s.maturity_bin
        );
    }
    for i in 0..n {
        for j in 0..n {
            let p = surrogate.transition[i][j];
            if p > 0.0 && p >= min_prob {
                let _ = writeln!(out, "    s{i} -> s{j} [label=\"{p:.2}\"];");
            }
        }
    }
    out.push_str("}\n");
    out
}

/// Decoded allocations, one row per month.
pub fn export_action_matrix(trace: &DiscreteTrace, spec: &BinSpec) -> Result<String, ExplainError> {
    let mut out = String::from("t");
    for class in AssetClass::ALL {
        out.push(',');
        out.push_str(class.label());
    }
    out.push('\n');
    for (t, step) in trace.steps.iter().enumerate() {
        let a = decode_action(&step.action, spec)?;
        let _ = write!(out, "{t}");
        for w in a.0 {
            let _ = write!(out, ",{w:.9}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub const FIDELITY_CSV_HEADER: &str =
    "agent,mode,seeds,exact_match,exact_match_std,match_savings,match_property,match_stocks,match_mortgage,match_luxury";

pub fn fidelity_csv_row(agent: &str, r: &FidelityReport) -> String {
    let mode = match r.mode {
        RolloutMode::Greedy => "greedy",
        RolloutMode::Sample => "sample",
    };
    let mut row = format!(
        "{agent},{mode},{},{:.6},{:.6}",
        r.seeds.len(),
        r.exact_match,
        r.exact_match_std
    );
    for c in r.component_match {
        let _ = write!(row, ",{c:.6}");
    }
    row
}

pub const SALIENCY_CSV_HEADER: &str = "agent,feature,baseline,collapsed,drop,rank";

pub fn saliency_csv_rows(agent: &str, r: &SaliencyReport) -> Vec<String> {
    r.features
        .iter()
        .map(|f| {
            format!(
                "{agent},{},{:.6},{:.6},{:.6},{}",
                f.feature, f.baseline, f.collapsed, f.drop, f.rank
            )
        })
        .collect()
}

//! Fully observed Markov surrogates: a transition matrix over visited states
//! and an emission matrix over observed action symbols, estimated by counting.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretize::{maturity_bin_at, ActionSymbol, DiscreteTrace, StateLayout, TraceStep};

pub const SURROGATE_FORMAT: &str = "markov-surrogate v1";

#[derive(Debug, Error, PartialEq)]
pub enum MarkovError {
    #[error("trace too short: need at least 2 steps, got {0}")]
    TraceTooShort(usize),
    #[error("traces use different state layouts or action alphabets")]
    IncompatibleTraces,
    #[error("negative smoothing {0}")]
    NegativeSmoothing(f64),
    #[error("surrogate parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Dense indices for the raw codes that were actually observed, in order of first visit.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    pub codes: Vec<u32>,
    pub counts: Vec<u64>,
    index: HashMap<u32, usize>,
}

impl Registry {
    pub fn new() -> Self {
        Self {
            codes: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn from_parts(codes: Vec<u32>, counts: Vec<u64>) -> Self {
        let index = codes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self {
            codes,
            counts,
            index,
        }
    }

    pub fn observe(&mut self, code: u32) -> usize {
        if let Some(&i) = self.index.get(&code) {
            self.counts[i] += 1;
            return i;
        }
        let i = self.codes.len();
        self.codes.push(code);
        self.counts.push(1);
        self.index.insert(code, i);
        i
    }

    pub fn get(&self, code: u32) -> Option<usize> {
        self.index.get(&code).copied()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::new()
    }
}

/// Row-major square or rectangular matrix with stochastic rows.
pub type Matrix = Vec<Vec<f64>>;

pub fn max_row_sum_error(m: &Matrix) -> f64 {
    m.iter()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSurrogate {
    pub layout: StateLayout,
    pub action_bins: usize,
    pub states: Registry,
    pub symbols: Registry,
    pub transition: Matrix,
    pub emission: Matrix,
    pub initial_code: u32,
    pub horizon: usize,
}

fn normalize_row(counts: &[f64], smoothing: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + smoothing * counts.len() as f64;
    counts.iter().map(|c| (c + smoothing) / total).collect()
}

/// Pools transition and emission counts over `traces`.
///
/// Rows without any outgoing transition (the final month's state when it is
/// never revisited) become self-loops.
pub fn fit_counts(
    traces: &[DiscreteTrace],
    smoothing: f64,
) -> Result<MarkovSurrogate, MarkovError> {
    if !(smoothing >= 0.0) {
        return Err(MarkovError::NegativeSmoothing(smoothing));
    }
    let first = traces.first().ok_or(MarkovError::TraceTooShort(0))?;
    for tr in traces {
        if tr.len() < 2 {
            return Err(MarkovError::TraceTooShort(tr.len()));
        }
        if tr.layout != first.layout || tr.action_bins != first.action_bins {
            return Err(MarkovError::IncompatibleTraces);
        }
    }

    let mut states = Registry::new();
    let mut symbols = Registry::new();
    let mut dense: Vec<Vec<(usize, usize)>> = Vec::with_capacity(traces.len());
    for tr in traces {
        dense.push(
            tr.steps
                .iter()
                .map(|s| {
                    (
                        states.observe(s.state.code as u32),
                        symbols.observe(s.action.id),
                    )
                })
                .collect(),
        );
    }
    let (n, m) = (states.len(), symbols.len());
    let mut trans = vec![vec![0.0; n]; n];
    let mut emit = vec![vec![0.0; m]; n];
    for seq in &dense {
        for w in seq.windows(2) {
            trans[w[0].0][w[1].0] += 1.0;
        }
        for &(s, y) in seq {
            emit[s][y] += 1.0;
        }
    }
    let transition = trans
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.iter().sum::<f64>() == 0.0 {
                let mut r = vec![0.0; n];
                r[i] = 1.0;
                r
            } else {
                normalize_row(row, smoothing)
            }
        })
        .collect();
    let emission = emit
        .iter()
        .map(|row| normalize_row(row, smoothing))
        .collect();

    Ok(MarkovSurrogate {
        layout: first.layout,
        action_bins: first.action_bins,
        states,
        symbols,
        transition,
        emission,
        initial_code: first.steps[0].state.code as u32,
        horizon: first.len(),
    })
}

/// Lowest index attaining the maximum of `weights` over `candidates`.
fn argmax_among(weights: &[f64], candidates: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &c in candidates {
        let w = weights[c];
        if w > 0.0 && best.is_none_or(|(_, bw)| w > bw) {
            best = Some((c, w));
        }
    }
    best.map(|(c, _)| c)
}

fn sample_among<R: Rng + ?Sized>(
    weights: &[f64],
    candidates: &[usize],
    rng: &mut R,
) -> Option<usize> {
    let total: f64 = candidates.iter().map(|&c| weights[c]).sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.gen::<f64>() * total;
    let mut last = None;
    for &c in candidates {
        if weights[c] > 0.0 {
            last = Some(c);
            if u < weights[c] {
                return Some(c);
            }
            u -= weights[c];
        }
    }
    last
}

impl MarkovSurrogate {
    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn symbol_count(&self) -> usize {
        self.symbols.len()
    }

    pub fn initial_index(&self) -> usize {
        self.states
            .get(self.initial_code)
            .expect("initial state is registered")
    }

    pub fn decode_index(&self, i: usize) -> crate::discretize::DiscreteState {
        self.layout
            .decode(self.states.codes[i] as usize)
            .expect("registered codes are valid")
    }

    fn symbol(&self, k: usize) -> ActionSymbol {
        ActionSymbol::from_id(self.symbols.codes[k], self.action_bins)
            .expect("registered symbols are valid")
    }

    /// Registered states grouped by maturity bin.
    fn by_maturity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.layout.n_maturity];
        for i in 0..self.state_count() {
            groups[self.decode_index(i).maturity_bin].push(i);
        }
        groups
    }

    /// Registered state in `candidates` closest to `from` in (macd, rsi) bins.
    fn nearest(&self, from: usize, candidates: &[usize]) -> Option<usize> {
        let f = self.decode_index(from);
        candidates.iter().copied().min_by_key(|&c| {
            let s = self.decode_index(c);
            (
                s.macd_bin.abs_diff(f.macd_bin) + s.rsi_bin.abs_diff(f.rsi_bin),
                c,
            )
        })
    }

    /// Open-loop rollout from the initial state.
    ///
    /// Maturity is a clock: at month `t + 1` the maturity bin is known in
    /// advance, so successors are drawn only among registered states carrying
    /// that bin. When the current row puts no mass on any of them, the
    /// nearest such state in (macd, rsi) is used instead. Greedy ties go to
    /// the lowest dense index.
    pub fn rollout(&self, mode: RolloutMode, seed: u64, horizon: usize) -> DiscreteTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = self.by_maturity();
        let all: Vec<usize> = (0..self.state_count()).collect();
        let all_symbols: Vec<usize> = (0..self.symbol_count()).collect();
        let mut steps = Vec::with_capacity(horizon);
        let mut cur = self.initial_index();
        for t in 0..horizon {
            let emission = &self.emission[cur];
            let k = match mode {
                RolloutMode::Greedy => argmax_among(emission, &all_symbols),
                RolloutMode::Sample => sample_among(emission, &all_symbols, &mut rng),
            }
            .unwrap_or(0);
            steps.push(TraceStep {
                state: self.decode_index(cur),
                action: self.symbol(k),
            });
            if t + 1 == horizon {
                break;
            }
            let want = maturity_bin_at(t + 1, horizon, self.layout.n_maturity);
            let candidates = match groups.get(want) {
                Some(g) if !g.is_empty() => g.as_slice(),
                _ => all.as_slice(),
            };
            let row = &self.transition[cur];
            let next = match mode {
                RolloutMode::Greedy => argmax_among(row, candidates),
                RolloutMode::Sample => sample_among(row, candidates, &mut rng),
            };
            cur = next
                .or_else(|| self.nearest(cur, candidates))
                .unwrap_or(cur);
        }
        DiscreteTrace {
            label: "surrogate".into(),
            layout: self.layout,
            action_bins: self.action_bins,
            steps,
        }
    }

    /// Text form: header, layout, registries, then `F` and `E` row-major with
    /// 12 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join_u = |v: &[u32]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let join_c = |v: &[u64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "{SURROGATE_FORMAT}");
        let _ = writeln!(
            out,
            "layout {} {} {} {}",
            self.layout.n_macd, self.layout.n_rsi, self.layout.n_maturity, self.action_bins
        );
        let _ = writeln!(out, "horizon {}", self.horizon);
        let _ = writeln!(out, "initial {}", self.initial_code);
        let _ = writeln!(out, "states {}", join_u(&self.states.codes));
        let _ = writeln!(out, "state_counts {}", join_c(&self.states.counts));
        let _ = writeln!(out, "symbols {}", join_u(&self.symbols.codes));
        let _ = writeln!(out, "symbol_counts {}", join_c(&self.symbols.counts));
        for (name, m) in [("F", &self.transition), ("E", &self.emission)] {
            let _ = writeln!(
                out,
                "{name} {} {}",
                m.len(),
                m.first().map_or(0, |r| r.len())
            );
            for row in m {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:.11e}")).collect();
                let _ = writeln!(out, "{}", cells.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, MarkovError> {
        let mut cur = LineCursor {
            lines: text.lines().collect(),
            pos: 0,
        };
        let header = cur.keyed("markov-surrogate")?;
        if header != ["v1"] {
            return Err(cur.error("unsupported format version"));
        }
        let l: Vec<usize> = cur.numbers("layout")?;
        if l.len() != 4 {
            return Err(cur.error("layout needs 4 fields"));
        }
        let layout = StateLayout {
            n_macd: l[0],
            n_rsi: l[1],
            n_maturity: l[2],
        };
        let action_bins = l[3];
        let horizon = cur.single("horizon")?;
        let initial_code = cur.single("initial")?;
        let states = Registry::from_parts(cur.numbers("states")?, cur.numbers("state_counts")?);
        let symbols = Registry::from_parts(cur.numbers("symbols")?, cur.numbers("symbol_counts")?);
        if states.codes.len() != states.counts.len() || symbols.codes.len() != symbols.counts.len()
        {
            return Err(cur.error("registry codes and counts differ in length"));
        }
        let transition = cur.matrix("F", states.len(), states.len())?;
        let emission = cur.matrix("E", states.len(), symbols.len())?;
        if states.get(initial_code).is_none() {
            return Err(cur.error("initial state is not registered"));
        }
        Ok(Self {
            layout,
            action_bins,
            states,
            symbols,
            transition,
            emission,
            initial_code,
            horizon,
        })
    }
}

struct LineCursor<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    fn error(&self, message: &str) -> MarkovError {
        MarkovError::Parse {
            line: self.pos,
            message: message.to_string(),
        }
    }

    fn raw(&mut self) -> Result<Vec<&'a str>, MarkovError> {
        let line = self.lines.get(self.pos).ok_or_else(|| MarkovError::Parse {
            line: self.pos + 1,
            message: "unexpected end of file".into(),
        })?;
        self.pos += 1;
        Ok(line.split_whitespace().collect())
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>, MarkovError> {
        let parts = self.raw()?;
        match parts.split_first() {
            Some((k, rest)) if *k == key => Ok(rest.to_vec()),
            _ => Err(self.error(&format!("expected `{key}`"))),
        }
    }

    fn parse_all<T: std::str::FromStr>(&self, parts: &[&str]) -> Result<Vec<T>, MarkovError> {
        parts
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| self.error(&format!("bad number {s:?}")))
            })
            .collect()
    }

    fn numbers<T: std::str::FromStr>(&mut self, key: &str) -> Result<Vec<T>, MarkovError> {
        let parts = self.keyed(key)?;
        self.parse_all(&parts)
    }

    fn single<T: std::str::FromStr + Copy>(&mut self, key: &str) -> Result<T, MarkovError> {
        let v: Vec<T> = self.numbers(key)?;
        match v.as_slice() {
            [x] => Ok(*x),
            _ => Err(self.error(&format!("`{key}` takes one value"))),
        }
    }

    fn matrix(&mut self, key: &str, rows: usize, cols: usize) -> Result<Matrix, MarkovError> {
        let dims: Vec<usize> = self.numbers(key)?;
        if dims != [rows, cols] {
            return Err(self.error(&format!(
                "{key} has shape {dims:?}, expected [{rows}, {cols}]"
            )));
        }
        (0..rows)
            .map(|_| {
                let parts = self.raw()?;
                let row: Vec<f64> = self.parse_all(&parts)?;
                if row.len() != cols {
                    return Err(self.error(&format!(
                        "{key} row has {} entries, expected {cols}",
                        row.len()
                    )));
                }
                Ok(row)
            })
            .collect()
    }
}

//! Discrete-emission hidden Markov models: scaled forward-backward and
//! Baum-Welch re-estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::markov::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum HmmError {
    #[error("observation symbol {symbol} at t={t} is outside the emission alphabet")]
    UnknownSymbol { t: usize, symbol: usize },
    #[error("observation at t={0} has zero probability under the model")]
    ZeroProbabilityObservation(usize),
    #[error("empty observation sequence")]
    EmptyObservations,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid Baum-Welch settings: {0}")]
    InvalidSettings(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    pub initial: Vec<f64>,
    pub transition: Matrix,
    pub emission: Matrix,
}

fn stochastic(row: &[f64]) -> bool {
    row.iter().all(|&p| (0.0..=1.0 + 1e-12).contains(&p))
        && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

fn random_row<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

impl HmmModel {
    pub fn new(initial: Vec<f64>, transition: Matrix, emission: Matrix) -> Result<Self, HmmError> {
        let n = initial.len();
        if n == 0 {
            return Err(HmmError::InvalidModel("no hidden states".into()));
        }
        if transition.len() != n || transition.iter().any(|r| r.len() != n) || emission.len() != n {
            return Err(HmmError::InvalidModel(
                "matrix shapes disagree with the state count".into(),
            ));
        }
        let m = emission[0].len();
        if m == 0 || emission.iter().any(|r| r.len() != m) {
            return Err(HmmError::InvalidModel("ragged emission matrix".into()));
        }
        if !stochastic(&initial)
            || !transition.iter().all(|r| stochastic(r))
            || !emission.iter().all(|r| stochastic(r))
        {
            return Err(HmmError::InvalidModel(
                "initial, transition and emission rows must be distributions".into(),
            ));
        }
        Ok(Self {
            initial,
            transition,
            emission,
        })
    }

    /// Random strictly positive model, for EM initialization.
    pub fn random(states: usize, symbols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            initial: random_row(states, &mut rng),
            transition: (0..states).map(|_| random_row(states, &mut rng)).collect(),
            emission: (0..states).map(|_| random_row(symbols, &mut rng)).collect(),
        }
    }

    pub fn states(&self) -> usize {
        self.initial.len()
    }

    pub fn symbols(&self) -> usize {
        self.emission[0].len()
    }

    /// Draws a hidden path and its observations.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
        let draw = |row: &[f64], rng: &mut R| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            row.len() - 1
        };
        let mut hidden = Vec::with_capacity(len);
        let mut obs = Vec::with_capacity(len);
        let mut x = draw(&self.initial, rng);
        for t in 0..len {
            if t > 0 {
                x = draw(&self.transition[x], rng);
            }
            hidden.push(x);
            obs.push(draw(&self.emission[x], rng));
        }
        (hidden, obs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    /// `gamma[t][i] = P(X_t = i | Y)`
    pub gamma: Vec<Vec<f64>>,
    /// `xi[t][i][j] = P(X_t = i, X_{t+1} = j | Y)`, `t < T - 1`
    pub xi: Vec<Matrix>,
    pub log_likelihood: f64,
}

/// Forward-backward with per-step normalization; the log-likelihood is the
/// sum of the log normalizers.
pub fn forward_backward(model: &HmmModel, obs: &[usize]) -> Result<Posteriors, HmmError> {
    let n = model.states();
    let len = obs.len();
    if len == 0 {
        return Err(HmmError::EmptyObservations);
    }
    if let Some((t, &symbol)) = obs.iter().enumerate().find(|(_, &y)| y >= model.symbols()) {
        return Err(HmmError::UnknownSymbol { t, symbol });
    }

    let mut alpha = vec![vec![0.0; n]; len];
    let mut scale = vec![0.0; len];
    for i in 0..n {
        alpha[0][i] = model.initial[i] * model.emission[i][obs[0]];
    }
    for t in 0..len {
        if t > 0 {
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += alpha[t - 1][i] * model.transition[i][j];
                }
                alpha[t][j] = acc * model.emission[j][obs[t]];
            }
        }
        let c: f64 = alpha[t].iter().sum();
        if c <= 0.0 || !c.is_finite() {
            return Err(HmmError::ZeroProbabilityObservation(t));
        }
        scale[t] = c;
        alpha[t].iter_mut().for_each(|a| *a /= c);
    }

    let mut beta = vec![vec![1.0; n]; len];
    for t in (0..len - 1).rev() {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += model.transition[i][j] * model.emission[j][obs[t + 1]] * beta[t + 1][j];
            }
            beta[t][i] = acc / scale[t + 1];
        }
    }

    let gamma: Vec<Vec<f64>> = (0..len)
        .map(|t| {
            let row: Vec<f64> = (0..n).map(|i| alpha[t][i] * beta[t][i]).collect();
            let s: f64 = row.iter().sum();
            row.iter().map(|g| g / s).collect()
        })
        .collect();
    let xi: Vec<Matrix> = (0..len.saturating_sub(1))
        .map(|t| {
            let mut m = vec![vec![0.0; n]; n];
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let v = alpha[t][i]
                        * model.transition[i][j]
                        * model.emission[j][obs[t + 1]]
                        * beta[t + 1][j];
                    m[i][j] = v;
                    s += v;
                }
            }
            m.iter_mut().flatten().for_each(|v| *v /= s);
            m
        })
        .collect();
    let log_likelihood = scale.iter().map(|c| c.ln()).sum();
    Ok(Posteriors {
        gamma,
        xi,
        log_likelihood,
    })
}

/// One EM re-estimation from posteriors. Rows with no expected occupancy keep
/// their previous values so every row stays a distribution.
fn reestimate(model: &HmmModel, obs: &[usize], post: &Posteriors) -> HmmModel {
    let n = model.states();
    let m = model.symbols();
    let len = obs.len();
    let initial = post.gamma[0].clone();

    let mut transition = model.transition.clone();
    for i in 0..n {
        let denom: f64 = (0..len - 1).map(|t| post.gamma[t][i]).sum();
        if denom > 0.0 {
            for j in 0..n {
                transition[i][j] = (0..len - 1).map(|t| post.xi[t][i][j]).sum::<f64>() / denom;
            }
            let s: f64 = transition[i].iter().sum();
            transition[i].iter_mut().for_each(|v| *v /= s);
        }
    }

    let mut emission = model.emission.clone();
    for i in 0..n {
        let denom: f64 = post.gamma.iter().map(|g| g[i]).sum();
        if denom > 0.0 {
            let mut row = vec![0.0; m];
            for (t, &y) in obs.iter().enumerate() {
                row[y] += post.gamma[t][i];
            }
            let s: f64 = row.iter().sum();
            emission[i] = row.iter().map(|v| v / s).collect();
        }
    }
    HmmModel {
        initial,
        transition,
        emission,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchResult {
    pub model: HmmModel,
    /// Log-likelihood of the starting model followed by one entry per iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
}

/// EM until `max_iters` iterations or an improvement below `tol`.
pub fn baum_welch(
    model: &HmmModel,
    obs: &[usize],
    max_iters: usize,
    tol: f64,
) -> Result<BaumWelchResult, HmmError> {
    if max_iters == 0 {
        return Err(HmmError::InvalidSettings("max_iters must be >= 1".into()));
    }
    if !(tol > 0.0) {
        return Err(HmmError::InvalidSettings("tol must be positive".into()));
    }
    let mut current = model.clone();
    let mut post = forward_backward(&current, obs)?;
    let mut history = vec![post.log_likelihood];
    let mut iterations = 0;
    for _ in 0..max_iters {
        let next = reestimate(&current, obs, &post);
        let next_post = forward_backward(&next, obs)?;
        let gain = next_post.log_likelihood - post.log_likelihood;
        history.push(next_post.log_likelihood);
        current = next;
        post = next_post;
        iterations += 1;
        if gain < tol {
            break;
        }
    }
    Ok(BaumWelchResult {
        model: current,
        history,
        iterations,
    })
}

//! DDPG with an affinity regularizer on the actor.
//!
//! The actor maximizes `mean Q(s, mu(s)) - lambda * L`, where `L` is the mean
//! squared gap between the batch-mean action and a fixed prior allocation.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    ActionVector, EnvError, EnvState, InvestEnv, Trajectory, NUM_ASSETS, NUM_FEATURES,
};
use crate::nn::{clip_grad_norm, softmax_backward, softmax_rows, Activation, Mlp, NnError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DdpgError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("soft-update rate {0} is outside [0, 1]")]
    TauOutOfRange(f64),
    #[error(transparent)]
    Shape(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite loss in episode {episode}")]
    NonFiniteLoss { episode: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, DdpgError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prototype {
    Openness,
    Conscientiousness,
    Extraversion,
    Agreeableness,
    Neuroticism,
}

impl Prototype {
    pub const ALL: [Prototype; 5] = [
        Prototype::Openness,
        Prototype::Conscientiousness,
        Prototype::Extraversion,
        Prototype::Agreeableness,
        Prototype::Neuroticism,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Prototype::Openness => "openness",
            Prototype::Conscientiousness => "conscientiousness",
            Prototype::Extraversion => "extraversion",
            Prototype::Agreeableness => "agreeableness",
            Prototype::Neuroticism => "neuroticism",
        }
    }

    /// Default allocation prior over (savings, property, stocks, mortgage, luxury).
    pub fn default_prior(self) -> [f64; NUM_ASSETS] {
        match self {
            Prototype::Openness => [0.05, 0.10, 0.40, 0.05, 0.40],
            Prototype::Conscientiousness => [0.15, 0.45, 0.05, 0.30, 0.05],
            Prototype::Extraversion => [0.0, 0.0, 0.9, 0.0, 0.1],
            Prototype::Agreeableness => [0.30, 0.25, 0.15, 0.25, 0.05],
            Prototype::Neuroticism => [0.50, 0.20, 0.05, 0.20, 0.05],
        }
    }
}

impl fmt::Display for Prototype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Prototype {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Prototype::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| format!("unknown prototype {s:?}"))
    }
}

/// Target allocation the batch-mean action is pulled towards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinityPrior {
    pub prototype: Prototype,
    pub weights: [f64; NUM_ASSETS],
}

impl AffinityPrior {
    pub fn new(prototype: Prototype, weights: [f64; NUM_ASSETS]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(DdpgError::InvalidConfig(format!(
                "prior for {prototype} must be non-negative and sum to 1 (sum {sum})"
            )));
        }
        Ok(Self { prototype, weights })
    }

    pub fn default_for(prototype: Prototype) -> Self {
        Self {
            prototype,
            weights: prototype.default_prior(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Exploration noise at the first episode, decayed linearly to `noise_sigma_final`.
    pub noise_sigma: f64,
    pub noise_sigma_final: f64,
    pub episodes: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 1e-2,
            critic_lr: 1e-2,
            optimizer: OptimizerKind::Sgd,
            grad_clip: 1.0,
            batch_size: 64,
            buffer_capacity: 50_000,
            noise_sigma: 0.1,
            noise_sigma_final: 0.01,
            episodes: 20,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DdpgError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(DdpgError::TauOutOfRange(self.tau));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be >= 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma_final >= 0.0) {
            return bad("noise scales must be >= 0");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }

    pub fn sigma_for_episode(&self, episode: usize) -> f64 {
        if self.episodes <= 1 {
            return self.noise_sigma;
        }
        let frac = episode as f64 / (self.episodes - 1) as f64;
        self.noise_sigma + (self.noise_sigma_final - self.noise_sigma) * frac
    }
}

/// Affine standardization of the raw observation before it reaches a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub shift: [f64; NUM_FEATURES],
    pub scale: [f64; NUM_FEATURES],
}

impl Default for FeatureScaler {
    fn default() -> Self {
        Self {
            shift: [0.0; NUM_FEATURES],
            scale: [1.0; NUM_FEATURES],
        }
    }
}

impl FeatureScaler {
    pub fn fit(states: &[EnvState]) -> Self {
        let mut out = Self::default();
        if states.is_empty() {
            return out;
        }
        let n = states.len() as f64;
        for k in 0..NUM_FEATURES {
            let mean = states.iter().map(|s| s.features[k]).sum::<f64>() / n;
            let var = states
                .iter()
                .map(|s| (s.features[k] - mean).powi(2))
                .sum::<f64>()
                / n;
            out.shift[k] = mean;
            out.scale[k] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, features: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        let mut x = *features;
        for k in 0..NUM_FEATURES {
            x[k] = (x[k] - self.shift[k]) / self.scale[k];
        }
        x
    }
}

/// Actor, critic and their slowly-tracking targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentBundle {
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub scaler: FeatureScaler,
}

impl AgentBundle {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut actor_sizes = vec![NUM_FEATURES];
        actor_sizes.extend_from_slice(hidden);
        actor_sizes.push(NUM_ASSETS);
        let mut critic_sizes = vec![NUM_FEATURES + NUM_ASSETS];
        critic_sizes.extend_from_slice(hidden);
        critic_sizes.push(1);
        let actor = Mlp::new(
            &actor_sizes,
            Activation::Tanh,
            Activation::Identity,
            3e-3,
            rng,
        )?;
        let critic = Mlp::new(
            &critic_sizes,
            Activation::Tanh,
            Activation::Identity,
            3e-3,
            rng,
        )?;
        Ok(Self {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            scaler: FeatureScaler::default(),
        })
    }

    fn scaled_rows(&self, states: &[[f64; NUM_FEATURES]]) -> Vec<f64> {
        states.iter().flat_map(|s| self.scaler.apply(s)).collect()
    }

    /// Softmax policy outputs for a batch of raw observations.
    pub fn policy_batch(&self, states: &[[f64; NUM_FEATURES]]) -> Result<Vec<f64>> {
        let x = self.scaled_rows(states);
        let logits = self.actor.forward(&x, states.len())?;
        Ok(softmax_rows(&logits, NUM_ASSETS))
    }
}

/// Deterministic policy output for one observation.
pub fn actor_forward(bundle: &AgentBundle, state: &EnvState) -> Result<ActionVector> {
    if bundle.actor.input_width() != NUM_FEATURES || bundle.actor.output_width() != NUM_ASSETS {
        return Err(NnError::ShapeMismatch {
            expected: NUM_FEATURES,
            got: bundle.actor.input_width(),
        }
        .into());
    }
    let p = bundle.policy_batch(&[state.features])?;
    let mut w = [0.0; NUM_ASSETS];
    w.copy_from_slice(&p);
    Ok(ActionVector(w))
}

/// Mean over components of the squared gap between the batch-mean action and the prior.
pub fn affinity_loss(actions: &[ActionVector], prior: &AffinityPrior) -> Result<f64> {
    if actions.is_empty() {
        return Err(DdpgError::EmptyBatch);
    }
    let mean = mean_action(actions);
    Ok(affinity_loss_of_mean(&mean, prior))
}

pub fn mean_action(actions: &[ActionVector]) -> [f64; NUM_ASSETS] {
    let mut mean = [0.0; NUM_ASSETS];
    for a in actions {
        for j in 0..NUM_ASSETS {
            mean[j] += a.0[j];
        }
    }
    mean.map(|m| m / actions.len() as f64)
}

fn affinity_loss_of_mean(mean: &[f64; NUM_ASSETS], prior: &AffinityPrior) -> f64 {
    mean.iter()
        .zip(&prior.weights)
        .map(|(m, p)| (m - p).powi(2))
        .sum::<f64>()
        / NUM_ASSETS as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: [f64; NUM_FEATURES],
    pub action: [f64; NUM_ASSETS],
    pub reward: f64,
    pub next_state: [f64; NUM_FEATURES],
    pub done: bool,
}

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sampling with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| self.items[rng.gen_range(0..self.items.len())])
            .collect()
    }
}

/// Per-parameter-vector optimizer state. Gradients are clipped by norm before use.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip: f64, n_params: usize) -> Self {
        let state = if kind == OptimizerKind::Adam {
            n_params
        } else {
            0
        };
        Self {
            kind,
            lr,
            clip,
            m: vec![0.0; state],
            v: vec![0.0; state],
            steps: 0,
        }
    }

    /// Moves `params` along `-grads` (descent).
    pub fn descend(&mut self, params: &mut [f64], grads: &mut [f64]) {
        if self.clip > 0.0 {
            clip_grad_norm(grads, self.clip);
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads.iter()) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                self.steps += 1;
                let c1 = 1.0 - B1.powi(self.steps);
                let c2 = 1.0 - B2.powi(self.steps);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
                    params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

struct Batch {
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    dones: Vec<f64>,
    len: usize,
}

fn assemble(bundle: &AgentBundle, batch: &[Transition]) -> Batch {
    let mut b = Batch {
        states: Vec::with_capacity(batch.len() * NUM_FEATURES),
        actions: Vec::with_capacity(batch.len() * NUM_ASSETS),
        rewards: Vec::with_capacity(batch.len()),
        next_states: Vec::with_capacity(batch.len() * NUM_FEATURES),
        dones: Vec::with_capacity(batch.len()),
        len: batch.len(),
    };
    for t in batch {
        b.states.extend(bundle.scaler.apply(&t.state));
        b.actions.extend_from_slice(&t.action);
        b.rewards.push(t.reward);
        b.next_states.extend(bundle.scaler.apply(&t.next_state));
        b.dones.push(if t.done { 1.0 } else { 0.0 });
    }
    b
}

fn concat_rows(a: &[f64], wa: usize, b: &[f64], wb: usize) -> Vec<f64> {
    let rows = a.len() / wa;
    let mut out = Vec::with_capacity(rows * (wa + wb));
    for r in 0..rows {
        out.extend_from_slice(&a[r * wa..(r + 1) * wa]);
        out.extend_from_slice(&b[r * wb..(r + 1) * wb]);
    }
    out
}

/// TD targets `r + gamma * (1 - done) * Q'(s', mu'(s'))`.
pub fn td_targets(bundle: &AgentBundle, batch: &[Transition], gamma: f64) -> Result<Vec<f64>> {
    let b = assemble(bundle, batch);
    targets_for(bundle, &b, gamma)
}

fn targets_for(bundle: &AgentBundle, b: &Batch, gamma: f64) -> Result<Vec<f64>> {
    let next_logits = bundle.target_actor.forward(&b.next_states, b.len)?;
    let next_actions = softmax_rows(&next_logits, NUM_ASSETS);
    let q_next = bundle.target_critic.forward(
        &concat_rows(&b.next_states, NUM_FEATURES, &next_actions, NUM_ASSETS),
        b.len,
    )?;
    Ok((0..b.len)
        .map(|i| b.rewards[i] + gamma * (1.0 - b.dones[i]) * q_next[i])
        .collect())
}

/// Mean squared TD error of the critic; forward pass only.
pub fn critic_loss(bundle: &AgentBundle, batch: &[Transition], gamma: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(DdpgError::EmptyBatch);
    }
    let b = assemble(bundle, batch);
    let y = targets_for(bundle, &b, gamma)?;
    let q = bundle.critic.forward(
        &concat_rows(&b.states, NUM_FEATURES, &b.actions, NUM_ASSETS),
        b.len,
    )?;
    Ok(q.iter().zip(&y).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / b.len as f64)
}

/// TD loss and its gradient with respect to the critic parameters.
pub fn critic_loss_and_grad(
    bundle: &AgentBundle,
    batch: &[Transition],
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(DdpgError::EmptyBatch);
    }
    let b = assemble(bundle, batch);
    let y = targets_for(bundle, &b, gamma)?;
    let cache = bundle.critic.forward_cached(
        &concat_rows(&b.states, NUM_FEATURES, &b.actions, NUM_ASSETS),
        b.len,
    )?;
    let n = b.len as f64;
    let diff: Vec<f64> = cache.output().iter().zip(&y).map(|(q, y)| q - y).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad_out: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
    let (grads, _) = bundle.critic.backward(&cache, &grad_out)?;
    Ok((loss, grads))
}

/// One critic descent step. Returns the pre-update TD loss.
pub fn critic_update(
    bundle: &mut AgentBundle,
    batch: &[Transition],
    gamma: f64,
    opt: &mut Optimizer,
) -> Result<f64> {
    let (loss, mut grads) = critic_loss_and_grad(bundle, batch, gamma)?;
    opt.descend(bundle.critic.params_mut(), &mut grads);
    Ok(loss)
}

/// `J = mean_b Q(s_b, mu(s_b)) - lambda * L(mu(s) over the batch)`; forward pass only.
pub fn actor_objective(
    bundle: &AgentBundle,
    states: &[[f64; NUM_FEATURES]],
    prior: &AffinityPrior,
    lambda: f64,
) -> Result<f64> {
    if states.is_empty() {
        return Err(DdpgError::EmptyBatch);
    }
    let x = bundle.scaled_rows(states);
    let probs = softmax_rows(&bundle.actor.forward(&x, states.len())?, NUM_ASSETS);
    let q = bundle.critic.forward(
        &concat_rows(&x, NUM_FEATURES, &probs, NUM_ASSETS),
        states.len(),
    )?;
    let mean_q = q.iter().sum::<f64>() / states.len() as f64;
    Ok(mean_q - lambda * affinity_loss_of_mean(&row_mean(&probs, states.len()), prior))
}

fn row_mean(probs: &[f64], rows: usize) -> [f64; NUM_ASSETS] {
    let mut mean = [0.0; NUM_ASSETS];
    for row in probs.chunks(NUM_ASSETS) {
        for j in 0..NUM_ASSETS {
            mean[j] += row[j];
        }
    }
    mean.map(|m| m / rows as f64)
}

/// Actor objective and its gradient with respect to the actor parameters.
/// The critic is only differentiated with respect to its action input.
pub fn actor_objective_and_grad(
    bundle: &AgentBundle,
    states: &[[f64; NUM_FEATURES]],
    prior: &AffinityPrior,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    if states.is_empty() {
        return Err(DdpgError::EmptyBatch);
    }
    let n = states.len();
    let x = bundle.scaled_rows(states);
    let actor_cache = bundle.actor.forward_cached(&x, n)?;
    let probs = softmax_rows(actor_cache.output(), NUM_ASSETS);
    let critic_cache = bundle
        .critic
        .forward_cached(&concat_rows(&x, NUM_FEATURES, &probs, NUM_ASSETS), n)?;
    let mean_q = critic_cache.output().iter().sum::<f64>() / n as f64;
    let mean = row_mean(&probs, n);
    let objective = mean_q - lambda * affinity_loss_of_mean(&mean, prior);

    let (_, dq_dinput) = bundle
        .critic
        .backward(&critic_cache, &vec![1.0 / n as f64; n])?;
    let width = NUM_FEATURES + NUM_ASSETS;
    // dL/da_bj = 2 (mean_j - prior_j) / (M n), identical for every row
    let reg: Vec<f64> = (0..NUM_ASSETS)
        .map(|j| lambda * 2.0 * (mean[j] - prior.weights[j]) / (NUM_ASSETS as f64 * n as f64))
        .collect();
    let mut dj_dprobs = Vec::with_capacity(n * NUM_ASSETS);
    for r in 0..n {
        let row = &dq_dinput[r * width + NUM_FEATURES..(r + 1) * width];
        dj_dprobs.extend(row.iter().zip(&reg).map(|(dq, dl)| dq - dl));
    }
    let dj_dlogits = softmax_backward(&probs, &dj_dprobs, NUM_ASSETS);
    let (grads, _) = bundle.actor.backward(&actor_cache, &dj_dlogits)?;
    Ok((objective, grads))
}

/// One actor ascent step on the regularized objective. Returns the pre-update objective.
pub fn actor_update(
    bundle: &mut AgentBundle,
    batch: &[Transition],
    prior: &AffinityPrior,
    lambda: f64,
    opt: &mut Optimizer,
) -> Result<f64> {
    let states: Vec<[f64; NUM_FEATURES]> = batch.iter().map(|t| t.state).collect();
    let (objective, grads) = actor_objective_and_grad(bundle, &states, prior, lambda)?;
    let mut neg: Vec<f64> = grads.iter().map(|g| -g).collect();
    opt.descend(bundle.actor.params_mut(), &mut neg);
    Ok(objective)
}

/// `target = tau * main + (1 - tau) * target` for both actor and critic.
pub fn soft_update(bundle: &mut AgentBundle, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(DdpgError::TauOutOfRange(tau));
    }
    let mix = |target: &mut Mlp, main: &Mlp| {
        for (t, m) in target.params_mut().iter_mut().zip(main.params()) {
            *t = tau * m + (1.0 - tau) * *t;
        }
    };
    mix(&mut bundle.target_actor, &bundle.actor);
    mix(&mut bundle.target_critic, &bundle.critic);
    Ok(())
}

/// Policy output with additive Gaussian noise, clipped at zero and renormalized.
pub fn select_action<R: Rng + ?Sized>(
    bundle: &AgentBundle,
    state: &EnvState,
    sigma: f64,
    rng: &mut R,
) -> Result<ActionVector> {
    let base = actor_forward(bundle, state)?;
    if sigma <= 0.0 {
        return Ok(base);
    }
    let mut w = base.0;
    for x in w.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x = (*x + sigma * z).max(0.0);
    }
    let sum: f64 = w.iter().sum();
    if sum <= 0.0 {
        return Ok(base);
    }
    Ok(ActionVector(w.map(|x| x / sum)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub episode_return: f64,
    pub affinity_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub episodes: Vec<EpisodeLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,return,affinity_loss\n");
        for e in &self.episodes {
            out.push_str(&format!(
                "{},{:.12e},{:.12e}\n",
                e.episode, e.episode_return, e.affinity_loss
            ));
        }
        out
    }

    pub fn final_affinity_loss(&self) -> Option<f64> {
        self.episodes.last().map(|e| e.affinity_loss)
    }
}

/// Freshly initialized bundle with its input scaler fitted to the environment's observations.
pub fn init_bundle(
    env: &InvestEnv,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AgentBundle> {
    let mut bundle = AgentBundle::new(&config.hidden, rng)?;
    bundle.scaler = FeatureScaler::fit(&env.all_states());
    Ok(bundle)
}

/// Deterministic full-horizon rollout; the final month gets an action but no step.
pub fn rollout_policy(bundle: &AgentBundle, env: &mut InvestEnv) -> Result<Trajectory> {
    let mut state = env.reset();
    let mut traj = Trajectory {
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    loop {
        let action = actor_forward(bundle, &state)?;
        traj.states.push(state);
        traj.actions.push(action);
        if env.is_done() || env.horizon() == 1 {
            break;
        }
        let out = env.step(&action)?;
        traj.rewards.push(out.reward);
        state = out.state;
    }
    Ok(traj)
}

/// Affinity loss of the deterministic policy over a set of observations.
pub fn policy_affinity_loss(
    bundle: &AgentBundle,
    states: &[EnvState],
    prior: &AffinityPrior,
) -> Result<f64> {
    let actions: Vec<ActionVector> = states
        .iter()
        .map(|s| actor_forward(bundle, s))
        .collect::<Result<_>>()?;
    affinity_loss(&actions, prior)
}

pub fn train(
    env: &mut InvestEnv,
    prior: &AffinityPrior,
    config: &TrainConfig,
) -> Result<(AgentBundle, TrainLog)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut bundle = init_bundle(env, config, &mut rng)?;
    let mut log = TrainLog::default();
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut critic_opt = Optimizer::new(
        config.optimizer,
        config.critic_lr,
        config.grad_clip,
        bundle.critic.params().len(),
    );
    let mut actor_opt = Optimizer::new(
        config.optimizer,
        config.actor_lr,
        config.grad_clip,
        bundle.actor.params().len(),
    );
    let all_states = env.all_states();

    for episode in 0..config.episodes {
        let sigma = config.sigma_for_episode(episode);
        let mut state = env.reset();
        let mut episode_return = 0.0;
        loop {
            let action = select_action(&bundle, &state, sigma, &mut rng)?;
            let out = env.step(&action)?;
            episode_return += out.reward;
            buffer.push(Transition {
                state: state.features,
                action: action.0,
                reward: out.reward,
                next_state: out.state.features,
                done: out.done,
            });
            if buffer.len() >= config.batch_size {
                let batch = buffer.sample(config.batch_size, &mut rng);
                let td = critic_update(&mut bundle, &batch, config.gamma, &mut critic_opt)?;
                let j = actor_update(&mut bundle, &batch, prior, config.lambda, &mut actor_opt)?;
                if !td.is_finite() || !j.is_finite() {
                    return Err(DdpgError::NonFiniteLoss { episode });
                }
                soft_update(&mut bundle, config.tau)?;
            }
            state = out.state;
            if out.done {
                break;
            }
        }
        let affinity = policy_affinity_loss(&bundle, &all_states, prior)?;
        if !episode_return.is_finite() || !affinity.is_finite() {
            return Err(DdpgError::NonFiniteLoss { episode });
        }
        log.episodes.push(EpisodeLog {
            episode,
            episode_return,
            affinity_loss: affinity,
        });
    }
    Ok((bundle, log))
}

/// Everything needed to reproduce and reload a trained agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub prior: AffinityPrior,
    pub config: TrainConfig,
    pub seed: u64,
    pub bundle: AgentBundle,
}

impl Checkpoint {
    pub fn new(prior: AffinityPrior, config: TrainConfig, bundle: AgentBundle) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            prior,
            seed: config.seed,
            config,
            bundle,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DdpgError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| DdpgError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(DdpgError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        let b = &ck.bundle;
        if !b.actor.same_shape(&b.target_actor) || !b.critic.same_shape(&b.target_critic) {
            return Err(DdpgError::Checkpoint(
                "target networks do not mirror main networks".into(),
            ));
        }
        Ok(ck)
    }
}

//! Affinity-regularized DDPG investment agents and their explanation as
//! discretized Markov surrogates.
//!
//! The pipeline runs market data through [`market_data`] into the
//! [`env::InvestEnv`] MDP, trains one [`ddpg`] agent per personality
//! prototype, discretizes each agent's rollout with [`discretize`], fits a
//! [`markov::MarkovSurrogate`] per agent and scores it in [`explain`].
// Dense numeric kernels index several parallel arrays per loop, and NaN
// inputs are rejected with `!(x >= 0.0)`-style guards on purpose.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod ddpg;
pub mod discretize;
pub mod env;
pub mod explain;
pub mod hmm;
mod io_util;
pub mod market_data;
pub mod markov;
pub mod nn;
pub mod pipeline;

pub use io_util::write_atomic;

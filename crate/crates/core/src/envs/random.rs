use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{block_assignment, random_sparse_row};
use crate::error::{Error, Result};
use crate::mdp::{EnvParts, EnvSpec, Policy};
use crate::rng::rng_from;

/// Unstructured random MDP, used for the exact theorem checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomEnvConfig {
    pub num_states: usize,
    pub num_categories: usize,
    pub actions_per_category: usize,
    /// Successors per (state, action).
    pub branching: usize,
    pub discount: f64,
    /// Adds one absorbing terminal state reachable from every row with this probability.
    pub terminal_prob: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for RandomEnvConfig {
    fn default() -> Self {
        RandomEnvConfig {
            num_states: 10,
            num_categories: 5,
            actions_per_category: 4,
            branching: 3,
            discount: 0.5,
            terminal_prob: 0.0,
            horizon: 20,
            seed: 0,
        }
    }
}

pub fn random_env(cfg: &RandomEnvConfig) -> Result<EnvSpec> {
    if cfg.num_states == 0 || cfg.num_categories == 0 || cfg.actions_per_category == 0 {
        return Err(Error::Config("random env needs positive sizes".into()));
    }
    if !(0.0..1.0).contains(&cfg.terminal_prob) {
        return Err(Error::Config("terminal_prob must lie in [0, 1)".into()));
    }
    let mut rng = rng_from(cfg.seed);
    let live = cfg.num_states;
    let with_terminal = cfg.terminal_prob > 0.0;
    let ns = live + usize::from(with_terminal);
    let na = cfg.num_categories * cfg.actions_per_category;
    let mut transitions = Vec::with_capacity(ns * na);
    let mut rewards = Vec::with_capacity(ns * na);
    for _ in 0..live {
        for _ in 0..na {
            let mut row = random_sparse_row(live, cfg.branching, &mut rng);
            if with_terminal {
                row.iter_mut().for_each(|x| x.1 *= 1.0 - cfg.terminal_prob);
                row.push((live, cfg.terminal_prob));
            }
            transitions.push(row);
            rewards.push(rng.random::<f64>());
        }
    }
    if with_terminal {
        for _ in 0..na {
            transitions.push(vec![(live, 1.0)]);
            rewards.push(0.0);
        }
    }
    let p0 = 1.0 / live as f64;
    EnvSpec::new(EnvParts {
        name: format!("random-{}", cfg.seed),
        num_states: ns,
        num_actions: na,
        num_categories: cfg.num_categories,
        action_category: block_assignment(cfg.num_categories, cfg.actions_per_category),
        transitions,
        rewards,
        discount: cfg.discount,
        terminal_states: if with_terminal { vec![live] } else { vec![] },
        initial: (0..live).map(|s| (s, p0)).collect(),
        horizon: cfg.horizon,
        tokens: None,
    })
}

/// Random full-support stochastic policy; `sharpness` > 1 concentrates rows.
pub fn random_policy(num_states: usize, num_actions: usize, sharpness: f64, seed: u64) -> Policy {
    let mut rng = rng_from(seed);
    let w: Vec<f64> = (0..num_states * num_actions)
        .map(|_| rng.random::<f64>().powf(sharpness) + 1e-6)
        .collect();
    Policy::from_weights(num_states, num_actions, w).expect("positive weights")
}

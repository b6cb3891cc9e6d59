use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{block_assignment, random_sparse_row, Classifier};
use crate::error::{Error, Result};
use crate::mdp::{EnvParts, EnvSpec};
use crate::rng::{rng_from, SimRng};

/// Share of each successor row that depends on the chosen category; the
/// rest is a per-state baseline shared by all actions.
const CATEGORY_DYNAMICS_WEIGHT: f64 = 0.2;

/// Synthetic MDP whose rewards separate by action category.
///
/// `R(s, a) = spread * mu[s][cat(a)] + noise * z[s][a]` with `mu ~ U(0, 1)`
/// and `z ~ N(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CategoricalEnvConfig {
    pub num_states: usize,
    pub num_categories: usize,
    pub actions_per_category: usize,
    pub category_value_spread: f64,
    pub noise_scale: f64,
    pub discount: f64,
    pub seed: u64,
    /// Successors per transition row.
    pub branching: usize,
    pub horizon: usize,
}

impl Default for CategoricalEnvConfig {
    fn default() -> Self {
        CategoricalEnvConfig {
            num_states: 20,
            num_categories: 19,
            actions_per_category: 5,
            category_value_spread: 1.0,
            noise_scale: 0.1,
            discount: 0.5,
            seed: 0,
            branching: 4,
            horizon: 10,
        }
    }
}

impl CategoricalEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 {
            return Err(Error::Config("num_states must be positive".into()));
        }
        if self.num_categories < 2 {
            return Err(Error::Config("num_categories must be >= 2".into()));
        }
        if self.actions_per_category < 2 {
            return Err(Error::Config("actions_per_category must be >= 2".into()));
        }
        if !(self.category_value_spread >= 0.0 && self.category_value_spread.is_finite()) {
            return Err(Error::Config("category_value_spread must be finite and >= 0".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be finite and >= 0".into()));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::Config("discount must lie strictly inside (0, 1)".into()));
        }
        if self.branching == 0 || self.horizon == 0 {
            return Err(Error::Config("branching and horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.num_categories * self.actions_per_category
    }
}

fn draw_means(cfg: &CategoricalEnvConfig, rng: &mut SimRng) -> Vec<f64> {
    (0..cfg.num_states * cfg.num_categories)
        .map(|_| cfg.category_value_spread * rng.random::<f64>())
        .collect()
}

/// Latent per-(state, category) reward means, `spread * mu`, row-major by state.
pub fn categorical_latent_means(cfg: &CategoricalEnvConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(draw_means(cfg, &mut rng_from(cfg.seed)))
}

pub fn make_categorical_env(cfg: &CategoricalEnvConfig) -> Result<(EnvSpec, Classifier)> {
    cfg.validate()?;
    let mut rng = rng_from(cfg.seed);
    let means = draw_means(cfg, &mut rng);
    let (ns, nc, k) = (cfg.num_states, cfg.num_categories, cfg.actions_per_category);
    let na = nc * k;
    let assign = block_assignment(nc, k);

    let mut rewards = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for &c in &assign {
            let z: f64 = rng.sample(StandardNormal);
            rewards.push(means[s * nc + c] + cfg.noise_scale * z);
        }
    }

    let mut transitions = Vec::with_capacity(ns * na);
    for _ in 0..ns {
        let base = random_sparse_row(ns, cfg.branching, &mut rng);
        let per_cat: Vec<Vec<(usize, f64)>> = (0..nc)
            .map(|_| random_sparse_row(ns, cfg.branching, &mut rng))
            .collect();
        for &c in &assign {
            let mut dense = vec![0.0; ns];
            for &(s2, p) in &base {
                dense[s2] += (1.0 - CATEGORY_DYNAMICS_WEIGHT) * p;
            }
            for &(s2, p) in &per_cat[c] {
                dense[s2] += CATEGORY_DYNAMICS_WEIGHT * p;
            }
            let mut row: Vec<(usize, f64)> =
                dense.into_iter().enumerate().filter(|x| x.1 > 0.0).collect();
            let total: f64 = row.iter().map(|x| x.1).sum();
            row.iter_mut().for_each(|x| x.1 /= total);
            transitions.push(row);
        }
    }

    let p0 = 1.0 / ns as f64;
    let env = EnvSpec::new(EnvParts {
        name: format!("categorical-{}", cfg.seed),
        num_states: ns,
        num_actions: na,
        num_categories: nc,
        action_category: assign.clone(),
        transitions,
        rewards,
        discount: cfg.discount,
        terminal_states: vec![],
        initial: (0..ns).map(|s| (s, p0)).collect(),
        horizon: cfg.horizon,
        tokens: None,
    })?;
    Ok((env, Classifier::new(assign, nc)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{argmax_lowest, exact_action_values, lump_by_category};
    use crate::data::make_behavior_policy;

    #[test]
    fn degenerate_spread_gives_flat_rewards() {
        let cfg = CategoricalEnvConfig {
            category_value_spread: 0.0,
            noise_scale: 0.0,
            num_states: 5,
            num_categories: 3,
            ..Default::default()
        };
        let (env, _) = make_categorical_env(&cfg).unwrap();
        for s in 0..5 {
            for a in 0..env.num_actions() {
                assert_eq!(env.reward(s, a), 0.0);
            }
        }
    }

    #[test]
    fn best_category_matches_enumeration() {
        let cfg = CategoricalEnvConfig {
            num_states: 6,
            num_categories: 4,
            actions_per_category: 5,
            category_value_spread: 1.0,
            noise_scale: 0.1,
            seed: 42,
            ..Default::default()
        };
        let (env, f) = make_categorical_env(&cfg).unwrap();
        // enumeration: mean reward over each category's actions at state 0
        let mut sums = vec![0.0; 4];
        for a in 0..env.num_actions() {
            sums[f.classify(a).unwrap()] += env.reward(0, a) / 5.0;
        }
        let means = categorical_latent_means(&cfg).unwrap();
        assert_eq!(argmax_lowest(&sums), argmax_lowest(&means[0..4]));
    }

    #[test]
    fn same_config_same_env() {
        let cfg = CategoricalEnvConfig::default();
        let a = make_categorical_env(&cfg).unwrap().0;
        let b = make_categorical_env(&cfg).unwrap().0;
        assert_eq!(a.to_json(), b.to_json());
        let other = make_categorical_env(&CategoricalEnvConfig { seed: 1, ..cfg }).unwrap().0;
        assert_ne!(a.fingerprint(), other.fingerprint());
    }

    #[test]
    fn invalid_counts_rejected() {
        let bad = CategoricalEnvConfig {
            num_categories: 1,
            ..Default::default()
        };
        assert!(matches!(make_categorical_env(&bad), Err(Error::Config(_))));
        let bad = CategoricalEnvConfig {
            actions_per_category: 1,
            ..Default::default()
        };
        assert!(make_categorical_env(&bad).is_err());
    }

    #[test]
    fn spread_dominated_env_has_informative_categories() {
        for seed in 0..5 {
            let cfg = CategoricalEnvConfig {
                category_value_spread: 1.0,
                noise_scale: 0.3,
                seed,
                ..Default::default()
            };
            let (env, _) = make_categorical_env(&cfg).unwrap();
            let beta = make_behavior_policy(&env, 0.5, 0.1).unwrap();
            let (lumped, _) = lump_by_category(&env, &beta).unwrap();
            let q = exact_action_values(&env, &beta, 1e-12).unwrap();
            let nc = env.num_categories();
            let mut agree = 0;
            for s in 0..env.num_states() {
                // category value under beta, by direct averaging of Q
                let mut qc = vec![0.0; nc];
                let mut mass = vec![0.0; nc];
                for a in 0..env.num_actions() {
                    let c = env.action_category(a);
                    qc[c] += beta.prob(s, a) * q.get(s, a);
                    mass[c] += beta.prob(s, a);
                }
                let qc: Vec<f64> = qc.iter().zip(&mass).map(|(x, m)| x / m).collect();
                let one_step: Vec<f64> = (0..nc).map(|c| lumped.reward(s, c)).collect();
                if argmax_lowest(&qc) == argmax_lowest(&one_step) {
                    agree += 1;
                }
            }
            assert!(agree * 10 >= env.num_states() * 9, "seed {seed}: {agree}");
        }
    }
}

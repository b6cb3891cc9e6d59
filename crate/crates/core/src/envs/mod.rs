//! Environment families and the action classifier.

mod categorical;
mod random;
mod token;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use categorical::{categorical_latent_means, make_categorical_env, CategoricalEnvConfig};
pub use random::{random_env, random_policy, RandomEnvConfig};
pub use token::{
    load_vocab, majority_topic, make_token_env, parse_vocab, Marker, PartnerScript, TokenEnvConfig,
    VocabEntry,
};

use crate::error::{Error, Result};
use crate::mdp::{ActionId, CategoryId, EnvSpec, StateId};
use crate::rewards::{Lexicon, RewardWeights};
use crate::rng::sample_sparse;

/// Text side of a token environment: the response behind every action and
/// the lexicon its rewards are scored against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenMeta {
    pub responses: Vec<Vec<String>>,
    pub lexicon: Lexicon,
    pub weights: RewardWeights,
    pub topic_names: Vec<String>,
}

impl TokenMeta {
    pub fn response(&self, a: ActionId) -> &[String] {
        &self.responses[a]
    }
}

/// Total map from fine actions to categories.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    assign: Vec<CategoryId>,
    num_categories: usize,
    blocks: Vec<Vec<ActionId>>,
}

impl Classifier {
    pub fn new(assign: Vec<CategoryId>, num_categories: usize) -> Result<Self> {
        if num_categories == 0 {
            return Err(Error::Config("classifier needs at least one category".into()));
        }
        let mut blocks = vec![Vec::new(); num_categories];
        for (a, &c) in assign.iter().enumerate() {
            if c >= num_categories {
                return Err(Error::Domain(format!("action {a} assigned to unknown category {c}")));
            }
            blocks[c].push(a);
        }
        Ok(Classifier {
            assign,
            num_categories,
            blocks,
        })
    }

    pub fn from_env(env: &EnvSpec) -> Self {
        Classifier::new(env.action_categories().to_vec(), env.num_categories())
            .expect("EnvSpec validated its categories")
    }

    pub fn num_actions(&self) -> usize {
        self.assign.len()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn classify(&self, a: ActionId) -> Result<CategoryId> {
        self.assign
            .get(a)
            .copied()
            .ok_or_else(|| Error::Domain(format!("action {a} is not in the classifier's domain")))
    }

    /// Actions of category `c`, ascending.
    pub fn block(&self, c: CategoryId) -> &[ActionId] {
        &self.blocks[c]
    }

    pub fn assignments(&self) -> &[CategoryId] {
        &self.assign
    }
}

pub fn classify(f: &Classifier, a: ActionId) -> Result<CategoryId> {
    f.classify(a)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub next: StateId,
    pub reward: f64,
    /// The successor is terminal. Horizon truncation is the caller's business.
    pub done: bool,
}

pub fn env_step<R: Rng + ?Sized>(env: &EnvSpec, s: StateId, a: ActionId, rng: &mut R) -> Result<Step> {
    if s >= env.num_states() {
        return Err(Error::Domain(format!("state {s} out of range")));
    }
    if a >= env.num_actions() {
        return Err(Error::Domain(format!("action {a} out of range")));
    }
    if env.is_terminal(s) {
        return Err(Error::Domain(format!("cannot step from terminal state {s}")));
    }
    let next = sample_sparse(env.transition(s, a), rng);
    Ok(Step {
        next,
        reward: env.reward(s, a),
        done: env.is_terminal(next),
    })
}

/// Sparse random row over `k` distinct states of `0..n`.
pub(crate) fn random_sparse_row<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<(usize, f64)> {
    let k = k.clamp(1, n);
    let picked = rand::seq::index::sample(rng, n, k);
    let mut row: Vec<(usize, f64)> = picked
        .iter()
        .map(|s| (s, rng.random::<f64>() + 1e-3))
        .collect();
    let total: f64 = row.iter().map(|x| x.1).sum();
    row.iter_mut().for_each(|x| x.1 /= total);
    row.sort_by_key(|x| x.0);
    row
}

/// Block map: action `a` belongs to category `a / per_category`.
pub(crate) fn block_assignment(num_categories: usize, per_category: usize) -> Vec<CategoryId> {
    (0..num_categories * per_category).map(|a| a / per_category).collect()
}

//! Finite MDPs and the exact dynamic-programming routines that ground-truth
//! the learned critics.
//!
//! Everything here is a pure function of its inputs. Evaluation iterates the
//! Bellman operator to a max-norm residual below the requested tolerance; the
//! environment is treated as infinite-horizon discounted (the `horizon` field
//! only caps rollouts).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::TokenMeta;
use crate::error::{Error, Result};

pub type StateId = usize;
pub type ActionId = usize;
pub type CategoryId = usize;

/// Tolerance on probability rows.
pub const ROW_TOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 10_000_000;

/// Raw parts of an [`EnvSpec`]; validated by [`EnvSpec::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParts {
    pub name: String,
    pub num_states: usize,
    pub num_actions: usize,
    pub num_categories: usize,
    /// Category of each action (the block/majority classifier, stored with the env).
    pub action_category: Vec<CategoryId>,
    /// Sparse successor rows, indexed `s * num_actions + a`.
    pub transitions: Vec<Vec<(StateId, f64)>>,
    /// Rewards, indexed `s * num_actions + a`.
    pub rewards: Vec<f64>,
    pub discount: f64,
    pub terminal_states: Vec<StateId>,
    pub initial: Vec<(StateId, f64)>,
    pub horizon: usize,
    #[serde(default)]
    pub tokens: Option<TokenMeta>,
}

/// A validated finite MDP `(S, A, T, R, gamma)` with an action-category map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnvParts", into = "EnvParts")]
pub struct EnvSpec {
    parts: EnvParts,
    terminal: Vec<bool>,
}

impl TryFrom<EnvParts> for EnvSpec {
    type Error = Error;

    fn try_from(parts: EnvParts) -> Result<Self> {
        EnvSpec::new(parts)
    }
}

impl From<EnvSpec> for EnvParts {
    fn from(env: EnvSpec) -> Self {
        env.parts
    }
}

fn check_row(row: &[(StateId, f64)], num_states: usize, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &(s, p) in row {
        if s >= num_states {
            return Err(Error::InvalidEnv(format!("{what}: state {s} out of range")));
        }
        if !p.is_finite() || p < 0.0 {
            return Err(Error::InvalidEnv(format!("{what}: bad probability {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidEnv(format!("{what}: probabilities sum to {sum}")));
    }
    Ok(())
}

impl EnvSpec {
    pub fn new(mut parts: EnvParts) -> Result<Self> {
        let (ns, na) = (parts.num_states, parts.num_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidEnv("empty state or action set".into()));
        }
        if !(parts.discount > 0.0 && parts.discount < 1.0) {
            return Err(Error::InvalidEnv(format!(
                "discount {} not strictly inside (0, 1)",
                parts.discount
            )));
        }
        if parts.horizon == 0 {
            return Err(Error::InvalidEnv("horizon must be positive".into()));
        }
        if parts.action_category.len() != na {
            return Err(Error::InvalidEnv("action_category length != num_actions".into()));
        }
        if parts.num_categories == 0 {
            return Err(Error::InvalidEnv("no categories".into()));
        }
        if let Some(&c) = parts.action_category.iter().find(|&&c| c >= parts.num_categories) {
            return Err(Error::InvalidEnv(format!("category {c} out of range")));
        }
        if parts.transitions.len() != ns * na || parts.rewards.len() != ns * na {
            return Err(Error::InvalidEnv("transition/reward tables have wrong size".into()));
        }
        if let Some(r) = parts.rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidEnv(format!("non-finite reward {r}")));
        }
        for (i, row) in parts.transitions.iter_mut().enumerate() {
            check_row(row, ns, &format!("T(.|s={}, a={})", i / na, i % na))?;
            row.sort_by_key(|&(s, _)| s);
            if row.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidEnv(format!("duplicate successor in row {i}")));
            }
        }
        let mut terminal = vec![false; ns];
        parts.terminal_states.sort_unstable();
        parts.terminal_states.dedup();
        for &t in &parts.terminal_states {
            if t >= ns {
                return Err(Error::InvalidEnv(format!("terminal state {t} out of range")));
            }
            terminal[t] = true;
            for a in 0..na {
                let row = &parts.transitions[t * na + a];
                if row.len() != 1 || row[0].0 != t || parts.rewards[t * na + a] != 0.0 {
                    return Err(Error::InvalidEnv(format!(
                        "terminal state {t} must self-loop with reward 0"
                    )));
                }
            }
        }
        check_row(&parts.initial, ns, "initial distribution")?;
        if let Some(tok) = &parts.tokens {
            if tok.responses.len() != na {
                return Err(Error::InvalidEnv("one response per action required".into()));
            }
        }
        Ok(EnvSpec { parts, terminal })
    }

    pub fn name(&self) -> &str {
        &self.parts.name
    }

    pub fn num_states(&self) -> usize {
        self.parts.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.parts.num_actions
    }

    pub fn num_categories(&self) -> usize {
        self.parts.num_categories
    }

    pub fn action_category(&self, a: ActionId) -> CategoryId {
        self.parts.action_category[a]
    }

    pub fn action_categories(&self) -> &[CategoryId] {
        &self.parts.action_category
    }

    pub fn transition(&self, s: StateId, a: ActionId) -> &[(StateId, f64)] {
        &self.parts.transitions[s * self.parts.num_actions + a]
    }

    pub fn reward(&self, s: StateId, a: ActionId) -> f64 {
        self.parts.rewards[s * self.parts.num_actions + a]
    }

    pub fn discount(&self) -> f64 {
        self.parts.discount
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        self.terminal[s]
    }

    pub fn terminal_states(&self) -> &[StateId] {
        &self.parts.terminal_states
    }

    pub fn non_terminal_states(&self) -> impl Iterator<Item = StateId> + '_ {
        (0..self.num_states()).filter(|&s| !self.terminal[s])
    }

    pub fn initial(&self) -> &[(StateId, f64)] {
        &self.parts.initial
    }

    pub fn horizon(&self) -> usize {
        self.parts.horizon
    }

    pub fn tokens(&self) -> Option<&TokenMeta> {
        self.parts.tokens.as_ref()
    }

    pub fn parts(&self) -> &EnvParts {
        &self.parts
    }

    /// Copy with a different discount factor.
    pub fn with_discount(&self, discount: f64) -> Result<EnvSpec> {
        let mut parts = self.parts.clone();
        parts.discount = discount;
        EnvSpec::new(parts)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("EnvSpec serializes")
    }

    pub fn from_json(text: &str) -> Result<EnvSpec> {
        serde_json::from_str(text).map_err(|e| Error::InvalidEnv(e.to_string()))
    }

    /// SHA-256 of the compact JSON encoding, hex encoded.
    pub fn fingerprint(&self) -> String {
        let compact = serde_json::to_vec(self).expect("EnvSpec serializes");
        hex::encode(Sha256::digest(&compact))
    }
}

/// Categorical distribution over actions (or categories) for every state.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    num_states: usize,
    num_choices: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(num_states: usize, num_choices: usize, probs: Vec<f64>) -> Result<Self> {
        if num_choices == 0 || probs.len() != num_states * num_choices {
            return Err(Error::InvalidPolicy(format!(
                "expected {num_states}x{num_choices} table, got {} entries",
                probs.len()
            )));
        }
        for (s, row) in probs.chunks(num_choices).enumerate() {
            let mut sum = 0.0;
            for &p in row {
                if !p.is_finite() || p < 0.0 {
                    return Err(Error::InvalidPolicy(format!("state {s}: bad probability {p}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidPolicy(format!("state {s}: row sums to {sum}")));
            }
        }
        Ok(Policy {
            num_states,
            num_choices,
            probs,
        })
    }

    /// Builds from unnormalized non-negative rows, normalizing each.
    pub fn from_weights(num_states: usize, num_choices: usize, mut w: Vec<f64>) -> Result<Self> {
        if num_choices == 0 || w.len() != num_states * num_choices {
            return Err(Error::InvalidPolicy("weight table has wrong size".into()));
        }
        for (s, row) in w.chunks_mut(num_choices).enumerate() {
            let total: f64 = row.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                return Err(Error::InvalidPolicy(format!("state {s}: weights sum to {total}")));
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        Policy::new(num_states, num_choices, w)
    }

    pub fn uniform(num_states: usize, num_choices: usize) -> Self {
        let p = 1.0 / num_choices as f64;
        Policy {
            num_states,
            num_choices,
            probs: vec![p; num_states * num_choices],
        }
    }

    pub fn deterministic(num_choices: usize, choice: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; choice.len() * num_choices];
        for (s, &a) in choice.iter().enumerate() {
            if a >= num_choices {
                return Err(Error::InvalidPolicy(format!("state {s}: choice {a} out of range")));
            }
            probs[s * num_choices + a] = 1.0;
        }
        Policy::new(choice.len(), num_choices, probs)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_choices(&self) -> usize {
        self.num_choices
    }

    pub fn row(&self, s: StateId) -> &[f64] {
        &self.probs[s * self.num_choices..(s + 1) * self.num_choices]
    }

    pub fn prob(&self, s: StateId, a: ActionId) -> f64 {
        self.probs[s * self.num_choices + a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Most probable choice at `s`, lowest id on ties.
    pub fn greedy(&self, s: StateId) -> ActionId {
        argmax_lowest(self.row(s))
    }

    pub fn check_shape(&self, num_states: usize, num_choices: usize) -> Result<()> {
        if self.num_states != num_states || self.num_choices != num_choices {
            return Err(Error::InvalidPolicy(format!(
                "policy is {}x{}, expected {num_states}x{num_choices}",
                self.num_states, self.num_choices
            )));
        }
        Ok(())
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable(pub Vec<f64>);

impl ValueTable {
    pub fn get(&self, s: StateId) -> f64 {
        self.0[s]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Initial-state expectation of the values.
    pub fn expected_under(&self, initial: &[(StateId, f64)]) -> f64 {
        initial.iter().map(|&(s, p)| p * self.0[s]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionValueTable {
    num_states: usize,
    num_actions: usize,
    q: Vec<f64>,
}

impl ActionValueTable {
    pub fn new(num_states: usize, num_actions: usize, q: Vec<f64>) -> Result<Self> {
        if q.len() != num_states * num_actions {
            return Err(Error::InvalidArgument("action-value table has wrong size".into()));
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite action value".into()));
        }
        Ok(ActionValueTable {
            num_states,
            num_actions,
            q,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, s: StateId, a: ActionId) -> f64 {
        self.q[s * self.num_actions + a]
    }

    pub fn row(&self, s: StateId) -> &[f64] {
        &self.q[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    Ok(())
}

/// Policy-averaged reward and dense successor matrix, rows of terminal states zeroed.
fn policy_model(env: &EnvSpec, pi: &Policy) -> (Vec<f64>, Vec<Vec<(StateId, f64)>>) {
    let ns = env.num_states();
    let mut r_pi = vec![0.0; ns];
    let mut p_pi = vec![Vec::new(); ns];
    let mut dense = vec![0.0; ns];
    for s in env.non_terminal_states() {
        dense.iter_mut().for_each(|x| *x = 0.0);
        for (a, &p) in pi.row(s).iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            r_pi[s] += p * env.reward(s, a);
            for &(s2, t) in env.transition(s, a) {
                dense[s2] += p * t;
            }
        }
        p_pi[s] = dense
            .iter()
            .enumerate()
            .filter(|&(s2, &x)| x != 0.0 && !env.is_terminal(s2))
            .map(|(s2, &x)| (s2, x))
            .collect();
    }
    (r_pi, p_pi)
}

/// `V^pi` by repeated application of the Bellman expectation operator.
///
/// The returned table has max-norm Bellman residual at most `tol`.
pub fn exact_policy_evaluation(env: &EnvSpec, pi: &Policy, tol: f64) -> Result<ValueTable> {
    check_tol(tol)?;
    pi.check_shape(env.num_states(), env.num_actions())?;
    let (r_pi, p_pi) = policy_model(env, pi);
    let gamma = env.discount();
    let mut v = vec![0.0; env.num_states()];
    let mut next = v.clone();
    for _ in 0..MAX_SWEEPS {
        let mut diff: f64 = 0.0;
        for s in 0..v.len() {
            let boot: f64 = p_pi[s].iter().map(|&(s2, p)| p * v[s2]).sum();
            next[s] = r_pi[s] + gamma * boot;
            diff = diff.max((next[s] - v[s]).abs());
        }
        std::mem::swap(&mut v, &mut next);
        if diff <= tol {
            return Ok(ValueTable(v));
        }
    }
    Err(Error::Numeric("policy evaluation did not converge".into()))
}

/// Max-norm residual `|| T^pi v - v ||`.
pub fn bellman_residual(env: &EnvSpec, pi: &Policy, v: &ValueTable) -> f64 {
    let (r_pi, p_pi) = policy_model(env, pi);
    let gamma = env.discount();
    (0..env.num_states())
        .map(|s| {
            let boot: f64 = p_pi[s].iter().map(|&(s2, p)| p * v.0[s2]).sum();
            (r_pi[s] + gamma * boot - v.0[s]).abs()
        })
        .fold(0.0, f64::max)
}

/// One-step lookahead `R(s,a) + gamma * sum_s' T(s'|s,a) V(s')`, terminal bootstrap 0.
pub fn q_from_values(env: &EnvSpec, v: &ValueTable) -> ActionValueTable {
    let (ns, na) = (env.num_states(), env.num_actions());
    let gamma = env.discount();
    let mut q = vec![0.0; ns * na];
    for s in env.non_terminal_states() {
        for a in 0..na {
            let boot: f64 = env
                .transition(s, a)
                .iter()
                .filter(|&&(s2, _)| !env.is_terminal(s2))
                .map(|&(s2, p)| p * v.0[s2])
                .sum();
            q[s * na + a] = env.reward(s, a) + gamma * boot;
        }
    }
    ActionValueTable {
        num_states: ns,
        num_actions: na,
        q,
    }
}

/// `Q^pi` from the exact `V^pi`.
pub fn exact_action_values(env: &EnvSpec, pi: &Policy, tol: f64) -> Result<ActionValueTable> {
    let v = exact_policy_evaluation(env, pi, tol)?;
    Ok(q_from_values(env, &v))
}

/// Optimal values and the greedy policy (ties to the lowest action id).
pub fn value_iteration(env: &EnvSpec, tol: f64) -> Result<(ValueTable, Policy)> {
    check_tol(tol)?;
    let (ns, na) = (env.num_states(), env.num_actions());
    let mut v = ValueTable(vec![0.0; ns]);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let q = q_from_values(env, &v);
        let mut diff: f64 = 0.0;
        let next: Vec<f64> = (0..ns)
            .map(|s| {
                let best = if env.is_terminal(s) {
                    0.0
                } else {
                    q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
                };
                diff = diff.max((best - v.0[s]).abs());
                best
            })
            .collect();
        v = ValueTable(next);
        if diff <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric("value iteration did not converge".into()));
    }
    let q = q_from_values(env, &v);
    let choice: Vec<usize> = (0..ns)
        .map(|s| if env.is_terminal(s) { 0 } else { argmax_lowest(q.row(s)) })
        .collect();
    Ok((v, Policy::deterministic(na, &choice)?))
}

/// Exact distribution of "draw `l` i.i.d. actions from `pi`, play the Q-argmax".
///
/// With `F` the c.d.f. of Q-values under `pi(.|s)`, the tie group at value
/// `q` is played with probability `F(q)^l - F(q-)^l`. Inside a tie group the
/// mass is shared in proportion to `pi`, which is what a uniformly random
/// choice among the tied draws produces; in particular `l = 1` returns `pi`.
pub fn induced_argmax_policy(pi: &Policy, q: &ActionValueTable, l: usize) -> Result<Policy> {
    if l == 0 {
        return Err(Error::InvalidArgument("number of sampled actions must be >= 1".into()));
    }
    pi.check_shape(q.num_states(), q.num_actions())?;
    let na = pi.num_choices();
    let mut out = vec![0.0; pi.num_states() * na];
    let mut order: Vec<usize> = (0..na).collect();
    for s in 0..pi.num_states() {
        let row = pi.row(s);
        let qs = q.row(s);
        order.sort_by(|&a, &b| qs[a].total_cmp(&qs[b]).then(a.cmp(&b)));
        let dst = &mut out[s * na..(s + 1) * na];
        let mut below = 0.0f64;
        let mut i = 0;
        while i < na {
            let mut j = i;
            let mut mass = 0.0;
            while j < na && qs[order[j]] == qs[order[i]] {
                mass += row[order[j]];
                j += 1;
            }
            let upto = below + mass;
            if mass > 0.0 {
                let group = pow_l(upto, l) - pow_l(below, l);
                for &a in &order[i..j] {
                    dst[a] = group * row[a] / mass;
                }
            }
            below = upto;
            i = j;
        }
        let total: f64 = dst.iter().sum();
        dst.iter_mut().for_each(|x| *x /= total);
    }
    Policy::new(pi.num_states(), na, out)
}

fn pow_l(x: f64, l: usize) -> f64 {
    match i32::try_from(l) {
        Ok(n) => x.powi(n),
        Err(_) => x.powf(l as f64),
    }
}

/// Category-level MDP seen through `pi`: choosing category `c` at `s` plays
/// `a ~ pi(.|s)` restricted to `c`. Returns the lumped env and the category
/// policy `pi(c|s)`.
///
/// Categories with no mass under `pi` at a state fall back to a uniform
/// choice inside the block.
pub fn lump_by_category(env: &EnvSpec, pi: &Policy) -> Result<(EnvSpec, Policy)> {
    pi.check_shape(env.num_states(), env.num_actions())?;
    let (ns, na, nc) = (env.num_states(), env.num_actions(), env.num_categories());
    let mut block_size = vec![0usize; nc];
    for a in 0..na {
        block_size[env.action_category(a)] += 1;
    }
    if let Some(c) = block_size.iter().position(|&k| k == 0) {
        return Err(Error::InvalidEnv(format!("category {c} has no actions")));
    }
    let mut transitions = Vec::with_capacity(ns * nc);
    let mut rewards = Vec::with_capacity(ns * nc);
    let mut cat_probs = vec![0.0; ns * nc];
    for s in 0..ns {
        let mut mass = vec![0.0; nc];
        for a in 0..na {
            mass[env.action_category(a)] += pi.prob(s, a);
        }
        cat_probs[s * nc..(s + 1) * nc].copy_from_slice(&mass);
        for c in 0..nc {
            if env.is_terminal(s) {
                transitions.push(vec![(s, 1.0)]);
                rewards.push(0.0);
                continue;
            }
            let mut dense = vec![0.0; ns];
            let mut r = 0.0;
            for a in (0..na).filter(|&a| env.action_category(a) == c) {
                let w = if mass[c] > 0.0 {
                    pi.prob(s, a) / mass[c]
                } else {
                    1.0 / block_size[c] as f64
                };
                if w == 0.0 {
                    continue;
                }
                r += w * env.reward(s, a);
                for &(s2, p) in env.transition(s, a) {
                    dense[s2] += w * p;
                }
            }
            let mut row: Vec<(usize, f64)> = dense
                .into_iter()
                .enumerate()
                .filter(|&(_, p)| p > 0.0)
                .collect();
            let total: f64 = row.iter().map(|x| x.1).sum();
            row.iter_mut().for_each(|x| x.1 /= total);
            transitions.push(row);
            rewards.push(r);
        }
    }
    let parts = EnvParts {
        name: format!("{}-lumped", env.name()),
        num_states: ns,
        num_actions: nc,
        num_categories: nc,
        action_category: (0..nc).collect(),
        transitions,
        rewards,
        discount: env.discount(),
        terminal_states: env.terminal_states().to_vec(),
        initial: env.initial().to_vec(),
        horizon: env.horizon(),
        tokens: None,
    };
    Ok((EnvSpec::new(parts)?, Policy::from_weights(ns, nc, cat_probs)?))
}

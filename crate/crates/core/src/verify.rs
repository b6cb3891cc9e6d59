//! Exact checks of the sampled-argmax improvement results and the desk-scale
//! diagnostics (hypothesis gap, conditioning fidelity, critic error).

use crate::envs::Classifier;
use crate::error::{Error, Result};
use crate::improve::{best_category, ControlGenerator};
use crate::mdp::{
    exact_action_values, exact_policy_evaluation, induced_argmax_policy, ActionId, ActionValueTable,
    CategoryId, EnvSpec, Policy, StateId, ValueTable,
};
use crate::par;
use crate::qlearn::QFunction;
use crate::rng::{sample_index, sub_rng, SimRng};

/// Slack for exact value comparisons.
pub const VALUE_SLACK: f64 = 1e-9;

/// Relative variance gap under which two samplers count as variance-close.
pub const VARIANCE_REL_TOL: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct TheoremReport {
    pub env_fingerprint: String,
    pub l_values: Vec<usize>,
    /// `V^{pi'_L}` for each entry of `l_values`.
    pub values: Vec<ValueTable>,
    /// `V^pi` of the sampling policy itself.
    pub base: ValueTable,
    /// `max(0, V_{L_i}(s) - V_{L_{i+1}}(s))` over consecutive L and all states.
    pub max_violation: f64,
    /// Where `max_violation` occurs: `(state, L_i, L_{i+1})`.
    pub worst: Option<(StateId, usize, usize)>,
    /// `max(0, V^pi(s) - V_L(s))` over all L and states.
    pub floor_violation: f64,
    pub monotone: bool,
}

/// Exact `V^{pi'_L}` for every L, with per-state monotonicity in L.
pub fn theorem1_curve(env: &EnvSpec, pi: &Policy, ls: &[usize], tol: f64) -> Result<TheoremReport> {
    if ls.is_empty() || ls[0] == 0 || ls.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("L values must be >= 1 and strictly ascending".into()));
    }
    let q = exact_action_values(env, pi, tol)?;
    let base = exact_policy_evaluation(env, pi, tol)?;
    let values = par::try_map_range(ls.len(), |i| {
        let induced = induced_argmax_policy(pi, &q, ls[i])?;
        exact_policy_evaluation(env, &induced, tol)
    })?;
    let mut max_violation = 0.0;
    let mut worst = None;
    for i in 1..values.len() {
        for s in 0..env.num_states() {
            let drop = values[i - 1].get(s) - values[i].get(s);
            if drop > max_violation {
                max_violation = drop;
                worst = Some((s, ls[i - 1], ls[i]));
            }
        }
    }
    let base_ref = &base;
    let floor_violation = values
        .iter()
        .flat_map(|v| (0..env.num_states()).map(move |s| base_ref.get(s) - v.get(s)))
        .fold(0.0, f64::max);
    Ok(TheoremReport {
        env_fingerprint: env.fingerprint(),
        l_values: ls.to_vec(),
        values,
        base,
        max_violation,
        worst,
        floor_violation,
        monotone: max_violation <= VALUE_SLACK,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem2Report {
    /// `E_{a~pi_alpha}[Q^{pi_eval}(s, a)]` per state.
    pub e_alpha: Vec<f64>,
    pub e_beta: Vec<f64>,
    pub var_alpha: Vec<f64>,
    pub var_beta: Vec<f64>,
    pub v1: ValueTable,
    pub v2: ValueTable,
    /// Non-terminal states where `E_alpha < E_beta`.
    pub premise_violated_states: Vec<StateId>,
    /// Largest `|var_alpha - var_beta| / max(var_beta, 1e-12)` over non-terminal states.
    pub variance_gap: f64,
    pub variance_close: bool,
    /// `max(0, V2(s) - V1(s))` over states.
    pub max_violation: f64,
    /// `None` when the premise fails somewhere; the conclusion is not asserted then.
    pub conclusion_holds: Option<bool>,
}

impl Theorem2Report {
    pub fn premise_holds(&self) -> bool {
        self.premise_violated_states.is_empty()
    }
}

fn moments(row: &[f64], q: &[f64]) -> (f64, f64) {
    let mean: f64 = row.iter().zip(q).map(|(p, x)| p * x).sum();
    let var: f64 = row.iter().zip(q).map(|(p, x)| p * (x - mean) * (x - mean)).sum();
    (mean, var.max(0.0))
}

/// Compares the exact values of the argmax-of-L policies built from two
/// samplers, both scored by `Q^{pi_eval}`.
pub fn theorem2_check(
    env: &EnvSpec,
    pi_alpha: &Policy,
    pi_beta: &Policy,
    pi_eval: &Policy,
    l: usize,
    tol: f64,
) -> Result<Theorem2Report> {
    let q = exact_action_values(env, pi_eval, tol)?;
    let ns = env.num_states();
    let (mut e_alpha, mut e_beta, mut var_alpha, mut var_beta) = (vec![], vec![], vec![], vec![]);
    let mut premise_violated_states = Vec::new();
    let mut variance_gap = 0.0f64;
    for s in 0..ns {
        let (ea, va) = moments(pi_alpha.row(s), q.row(s));
        let (eb, vb) = moments(pi_beta.row(s), q.row(s));
        if !env.is_terminal(s) {
            if ea < eb - 1e-12 {
                premise_violated_states.push(s);
            }
            variance_gap = variance_gap.max((va - vb).abs() / vb.max(1e-12));
        }
        e_alpha.push(ea);
        e_beta.push(eb);
        var_alpha.push(va);
        var_beta.push(vb);
    }
    let v1 = exact_policy_evaluation(env, &induced_argmax_policy(pi_alpha, &q, l)?, tol)?;
    let v2 = exact_policy_evaluation(env, &induced_argmax_policy(pi_beta, &q, l)?, tol)?;
    let max_violation = (0..ns).map(|s| v2.get(s) - v1.get(s)).fold(0.0, f64::max);
    let conclusion_holds = premise_violated_states
        .is_empty()
        .then_some(max_violation <= VALUE_SLACK);
    Ok(Theorem2Report {
        e_alpha,
        e_beta,
        var_alpha,
        var_beta,
        v1,
        v2,
        premise_violated_states,
        variance_gap,
        variance_close: variance_gap <= VARIANCE_REL_TOL,
        max_violation,
        conclusion_holds,
    })
}

/// Something that proposes one action at a state.
pub trait ActionSampler: Sync {
    fn draw(&self, s: StateId, rng: &mut SimRng) -> Result<ActionId>;
}

impl ActionSampler for Policy {
    fn draw(&self, s: StateId, rng: &mut SimRng) -> Result<ActionId> {
        if s >= self.num_states() {
            return Err(Error::Domain(format!("state {s} outside the policy's domain")));
        }
        Ok(sample_index(self.row(s), rng))
    }
}

/// The dual pipeline's proposal: best coarse category, then the generator.
pub struct DualSampler<'a> {
    pub q_coarse: &'a QFunction,
    pub gen: &'a ControlGenerator,
}

impl ActionSampler for DualSampler<'_> {
    fn draw(&self, s: StateId, rng: &mut SimRng) -> Result<ActionId> {
        let c = best_category(self.q_coarse, s)?;
        self.gen.sample(s, c, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HypothesisGap {
    pub e_a: f64,
    pub e_b: f64,
    /// `(e_a - e_b) / |e_b|`.
    pub gap: f64,
    /// Delta-method standard error of `gap`, states held fixed.
    pub gap_se: f64,
}

impl HypothesisGap {
    /// One-sided 95% lower bound on the gap.
    pub fn lower_95(&self) -> f64 {
        self.gap - 1.6448536269514722 * self.gap_se
    }
}

/// Mean fitted Q of `n` draws per state from each sampler, averaged over
/// states, and their relative gap.
pub fn hypothesis_gap(
    q_fine: &QFunction,
    sampler_a: &dyn ActionSampler,
    sampler_b: &dyn ActionSampler,
    states: &[StateId],
    n: usize,
    seed: u64,
) -> Result<HypothesisGap> {
    if n == 0 || states.is_empty() {
        return Err(Error::InvalidArgument("need at least one state and one draw".into()));
    }
    let per_state = par::try_map_range(states.len(), |i| -> Result<[(f64, f64); 2]> {
        let s = states[i];
        let mut out = [(0.0, 0.0); 2];
        for (k, sampler) in [sampler_a, sampler_b].into_iter().enumerate() {
            let mut rng = sub_rng(seed, (2 * i + k) as u64);
            let xs = (0..n)
                .map(|_| q_fine.value(s, sampler.draw(s, &mut rng)?))
                .collect::<Result<Vec<f64>>>()?;
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            out[k] = (mean, var);
        }
        Ok(out)
    })?;
    let m = states.len() as f64;
    let e_a = per_state.iter().map(|x| x[0].0).sum::<f64>() / m;
    let e_b = per_state.iter().map(|x| x[1].0).sum::<f64>() / m;
    let var_a = per_state.iter().map(|x| x[0].1).sum::<f64>() / (n as f64 * m * m);
    let var_b = per_state.iter().map(|x| x[1].1).sum::<f64>() / (n as f64 * m * m);
    if e_b == 0.0 {
        return Err(Error::Numeric("reference sampler has zero mean Q; relative gap undefined".into()));
    }
    let gap = (e_a - e_b) / e_b.abs();
    let ratio = e_a / e_b;
    let gap_se = (var_a + ratio * ratio * var_b).sqrt() / e_b.abs();
    Ok(HypothesisGap { e_a, e_b, gap, gap_se })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidelityEstimate {
    pub ratio: f64,
    /// Binomial standard error of `ratio`.
    pub se: f64,
    pub draws: usize,
}

/// Fraction of generator draws that land in the requested category, over
/// every `(state, category)` pair.
pub fn conditioning_fidelity(
    gen: &ControlGenerator,
    f: &Classifier,
    states: &[StateId],
    categories: &[CategoryId],
    n_per_pair: usize,
    seed: u64,
) -> Result<FidelityEstimate> {
    if n_per_pair == 0 || states.is_empty() || categories.is_empty() {
        return Err(Error::InvalidArgument("need states, categories and draws".into()));
    }
    let pairs: Vec<(StateId, CategoryId)> = states
        .iter()
        .flat_map(|&s| categories.iter().map(move |&c| (s, c)))
        .collect();
    let hits = par::try_map_range(pairs.len(), |i| -> Result<usize> {
        let (s, c) = pairs[i];
        let mut rng = sub_rng(seed, i as u64);
        let mut hit = 0;
        for _ in 0..n_per_pair {
            if f.classify(gen.sample(s, c, &mut rng)?)? == c {
                hit += 1;
            }
        }
        Ok(hit)
    })?;
    let draws = pairs.len() * n_per_pair;
    let ratio = hits.iter().sum::<usize>() as f64 / draws as f64;
    Ok(FidelityEstimate {
        ratio,
        se: (ratio * (1.0 - ratio) / draws as f64).sqrt(),
        draws,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QError {
    pub max_abs: f64,
    pub mean_abs: f64,
}

pub fn oracle_q_error(q_fitted: &QFunction, q_exact: &ActionValueTable) -> Result<QError> {
    if q_fitted.num_states() != q_exact.num_states() || q_fitted.num_choices() != q_exact.num_actions() {
        return Err(Error::Domain(format!(
            "critic is {}x{} but the oracle table is {}x{}",
            q_fitted.num_states(),
            q_fitted.num_choices(),
            q_exact.num_states(),
            q_exact.num_actions()
        )));
    }
    let fitted = q_fitted.to_table();
    let diffs: Vec<f64> = fitted
        .as_slice()
        .iter()
        .zip(q_exact.as_slice())
        .map(|(a, b)| (a - b).abs())
        .collect();
    Ok(QError {
        max_abs: diffs.iter().cloned().fold(0.0, f64::max),
        mean_abs: diffs.iter().sum::<f64>() / diffs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Granularity;
    use crate::envs::{random_env, random_policy, RandomEnvConfig};

    #[test]
    fn single_l_is_the_base_policy() {
        let env = random_env(&RandomEnvConfig::default()).unwrap();
        let pi = random_policy(env.num_states(), env.num_actions(), 1.0, 3);
        let rep = theorem1_curve(&env, &pi, &[1], 1e-12).unwrap();
        for s in 0..env.num_states() {
            assert!((rep.values[0].get(s) - rep.base.get(s)).abs() < 1e-12);
        }
        assert!(theorem1_curve(&env, &pi, &[2, 1], 1e-12).is_err());
    }

    #[test]
    fn identical_samplers_give_equal_values() {
        let env = random_env(&RandomEnvConfig::default()).unwrap();
        let pi = random_policy(env.num_states(), env.num_actions(), 1.0, 4);
        let rep = theorem2_check(&env, &pi, &pi, &pi, 4, 1e-12).unwrap();
        assert_eq!(rep.v1, rep.v2);
        assert_eq!(rep.conclusion_holds, Some(true));
    }

    struct Fixed(ActionId);

    impl ActionSampler for Fixed {
        fn draw(&self, _: StateId, _: &mut SimRng) -> Result<ActionId> {
            Ok(self.0)
        }
    }

    #[test]
    fn point_mass_gap_is_exact() {
        let q = QFunction::from_table(&ActionValueTable::new(1, 2, vec![5.0, 4.0]).unwrap(), Granularity::Fine);
        let g = hypothesis_gap(&q, &Fixed(0), &Fixed(1), &[0], 10, 0).unwrap();
        assert_eq!(g.gap, 0.25);
        assert_eq!(g.gap_se, 0.0);
    }

    #[test]
    fn constant_offset_error() {
        let exact = ActionValueTable::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let shifted = ActionValueTable::new(2, 2, vec![1.5, 2.5, 3.5, 4.5]).unwrap();
        let e = oracle_q_error(&QFunction::from_table(&shifted, Granularity::Fine), &exact).unwrap();
        assert_eq!(e.max_abs, 0.5);
        assert_eq!(e.mean_abs, 0.5);
        let same = oracle_q_error(&QFunction::from_table(&exact, Granularity::Fine), &exact).unwrap();
        assert_eq!((same.max_abs, same.mean_abs), (0.0, 0.0));
    }
}

//! Sampled-argmax policy improvement in standard and dual-granularity form,
//! the category-conditioned control generator, and behavior cloning.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::envs::Classifier;
use crate::error::{Error, Result};
use crate::mdp::{argmax_lowest, ActionId, CategoryId, EnvSpec, Policy, StateId};
use crate::par;
use crate::qlearn::QFunction;
use crate::rng::{sample_index, sub_rng, SimRng};

/// Category-conditioned action sampler `pi_psi(a | s, c)`.
///
/// With probability `fidelity` a draw comes from the in-category
/// conditional; otherwise it is uniform over the whole action set.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGenerator {
    num_states: usize,
    classifier: Classifier,
    /// Conditional over `classifier.block(c)`, indexed `s * C + c`.
    cond: Vec<Vec<f64>>,
    fidelity: f64,
    temperature: f64,
}

impl ControlGenerator {
    /// Generator whose in-category conditional is uniform over each block.
    pub fn uniform(f: &Classifier, num_states: usize) -> Self {
        let cond = (0..num_states)
            .flat_map(|_| (0..f.num_categories()).map(|c| vec![1.0 / f.block(c).len() as f64; f.block(c).len()]))
            .collect();
        ControlGenerator {
            num_states,
            classifier: f.clone(),
            cond,
            fidelity: 1.0,
            temperature: 1.0,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.classifier.num_actions()
    }

    pub fn num_categories(&self) -> usize {
        self.classifier.num_categories()
    }

    pub fn fidelity(&self) -> f64 {
        self.fidelity
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_fidelity(mut self, fidelity: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fidelity) {
            return Err(Error::InvalidArgument(format!("fidelity {fidelity} outside [0, 1]")));
        }
        self.fidelity = fidelity;
        Ok(self)
    }

    fn check(&self, s: StateId, c: CategoryId) -> Result<()> {
        if s >= self.num_states {
            return Err(Error::Domain(format!("state {s} outside the generator's domain")));
        }
        if c >= self.num_categories() {
            return Err(Error::Domain(format!("category {c} is not known to the generator")));
        }
        Ok(())
    }

    /// In-category conditional over `block(c)`, before fidelity leakage.
    pub fn conditional(&self, s: StateId, c: CategoryId) -> Result<&[f64]> {
        self.check(s, c)?;
        Ok(&self.cond[s * self.num_categories() + c])
    }

    /// Full distribution over all actions, leakage included.
    pub fn distribution(&self, s: StateId, c: CategoryId) -> Result<Vec<f64>> {
        let cond = self.conditional(s, c)?;
        let na = self.num_actions();
        let mut p = vec![(1.0 - self.fidelity) / na as f64; na];
        for (&a, &q) in self.classifier.block(c).iter().zip(cond) {
            p[a] += self.fidelity * q;
        }
        Ok(p)
    }

    pub fn sample(&self, s: StateId, c: CategoryId, rng: &mut SimRng) -> Result<ActionId> {
        let cond = self.conditional(s, c)?;
        let leak = self.fidelity < 1.0 && rand::Rng::random::<f64>(rng) >= self.fidelity;
        if leak {
            return Ok(rand::Rng::random_range(rng, 0..self.num_actions()));
        }
        Ok(self.classifier.block(c)[sample_index(cond, rng)])
    }
}

fn temper(w: &mut [f64], temperature: f64) {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        let u = 1.0 / w.len() as f64;
        w.iter_mut().for_each(|x| *x = u);
        return;
    }
    let max = w.iter().cloned().fold(0.0, f64::max);
    // p^(1/T) computed in log space relative to the max for stability
    for x in w.iter_mut() {
        *x = if *x > 0.0 { ((*x / max).ln() / temperature).exp() } else { 0.0 };
    }
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
}

/// Per-(state, category) action frequencies from the dataset, additively
/// smoothed and tempered (`p^(1/T)`, renormalized). Pairs with no mass fall
/// back to uniform over the block. The result has fidelity 1.
pub fn fit_control_generator(
    d: &Dataset,
    f: &Classifier,
    num_states: usize,
    temperature: f64,
    smoothing: f64,
) -> Result<ControlGenerator> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::InvalidArgument(format!("smoothing {smoothing} must be >= 0")));
    }
    let na = f.num_actions();
    let nc = f.num_categories();
    let mut counts = vec![0.0; num_states * na];
    for t in &d.transitions {
        if t.s >= num_states || t.a >= na {
            return Err(Error::Domain(format!(
                "transition (episode {}, t {}) has ({}, {}) outside the generator's domain",
                t.episode_id, t.t, t.s, t.a
            )));
        }
        counts[t.s * na + t.a] += 1.0;
    }
    let mut cond = Vec::with_capacity(num_states * nc);
    for s in 0..num_states {
        for c in 0..nc {
            let mut w: Vec<f64> = f.block(c).iter().map(|&a| counts[s * na + a] + smoothing).collect();
            temper(&mut w, temperature);
            cond.push(w);
        }
    }
    Ok(ControlGenerator {
        num_states,
        classifier: f.clone(),
        cond,
        fidelity: 1.0,
        temperature,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Standard,
    Dual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImprovementConfig {
    pub num_candidates: usize,
    pub mode: Mode,
    pub cloning_smoothing: f64,
    /// Improvement passes; each pass after the first samples from the
    /// previous pass's cloned policy in standard mode.
    pub passes: usize,
    pub seed: u64,
}

impl Default for ImprovementConfig {
    fn default() -> Self {
        ImprovementConfig {
            num_candidates: 5,
            mode: Mode::Dual,
            cloning_smoothing: 0.0,
            passes: 1,
            seed: 0,
        }
    }
}

impl ImprovementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates == 0 {
            return Err(Error::Config("num_candidates must be >= 1".into()));
        }
        if self.passes == 0 {
            return Err(Error::Config("passes must be >= 1".into()));
        }
        if !(self.cloning_smoothing >= 0.0 && self.cloning_smoothing.is_finite()) {
            return Err(Error::Config("cloning_smoothing must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub state: StateId,
    pub actions: Vec<ActionId>,
}

/// Where candidates come from.
#[derive(Clone, Copy, Debug)]
pub enum Source<'a> {
    Policy(&'a Policy),
    Generator(&'a ControlGenerator),
}

/// `n` i.i.d. draws (with replacement) from `source` at `s`. A category must
/// be given exactly when the source is a generator.
pub fn sample_candidates(
    source: Source<'_>,
    s: StateId,
    category: Option<CategoryId>,
    n: usize,
    rng: &mut SimRng,
) -> Result<CandidateSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("candidate count must be >= 1".into()));
    }
    let actions = match (source, category) {
        (Source::Policy(pi), None) => {
            if s >= pi.num_states() {
                return Err(Error::Domain(format!("state {s} outside the policy's domain")));
            }
            (0..n).map(|_| sample_index(pi.row(s), rng)).collect()
        }
        (Source::Generator(g), Some(c)) => (0..n).map(|_| g.sample(s, c, rng)).collect::<Result<_>>()?,
        (Source::Policy(_), Some(_)) => {
            return Err(Error::InvalidArgument("a plain policy takes no category".into()))
        }
        (Source::Generator(_), None) => {
            return Err(Error::InvalidArgument("a generator needs a category".into()))
        }
    };
    Ok(CandidateSet { state: s, actions })
}

/// `argmax_c Q_phi(s, c)`, lowest id on ties.
pub fn best_category(q_coarse: &QFunction, s: StateId) -> Result<CategoryId> {
    Ok(argmax_lowest(&q_coarse.row(s)?))
}

/// `argmax_a Q_theta(s, a)` over the candidates, lowest action id on ties.
pub fn best_action(q_fine: &QFunction, c: &CandidateSet) -> Result<ActionId> {
    let mut best: Option<(f64, ActionId)> = None;
    for &a in &c.actions {
        let v = q_fine.value(c.state, a)?;
        best = match best {
            Some((bv, ba)) if bv > v || (bv == v && ba <= a) => Some((bv, ba)),
            _ => Some((v, a)),
        };
    }
    best.map(|b| b.1)
        .ok_or_else(|| Error::InvalidArgument("empty candidate set".into()))
}

/// Smoothed maximum-likelihood policy: `pi(a|s) ∝ count(s, a) + smoothing`,
/// uniform at states with no choices.
pub fn clone_policy(
    choices: &[(StateId, ActionId)],
    num_states: usize,
    num_actions: usize,
    smoothing: f64,
) -> Result<Policy> {
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::InvalidArgument(format!("smoothing {smoothing} must be >= 0")));
    }
    let mut w = vec![0.0; num_states * num_actions];
    for &(s, a) in choices {
        if s >= num_states || a >= num_actions {
            return Err(Error::Domain(format!("choice ({s}, {a}) out of range")));
        }
        w[s * num_actions + a] += 1.0;
    }
    for row in w.chunks_mut(num_actions) {
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            row.iter_mut().for_each(|x| *x = 1.0);
        } else {
            row.iter_mut().for_each(|x| *x += smoothing);
        }
    }
    Policy::from_weights(num_states, num_actions, w)
}

/// Result of one improvement run.
#[derive(Clone, Debug, PartialEq)]
pub struct Improvement {
    pub policy: Policy,
    /// `(s, a*)` per dataset transition, in dataset order (last pass).
    pub choices: Vec<(StateId, ActionId)>,
    /// Candidate evaluations that hit tabular entries never trained (valued 0).
    pub unvisited_queries: usize,
}

/// For each dataset state: pick candidates (from `base`, or from `gen`
/// conditioned on the coarse critic's best category), keep the fine
/// critic's argmax, then clone the choices.
pub fn improve_policy(
    env: &EnvSpec,
    d: &Dataset,
    q_fine: &QFunction,
    q_coarse: Option<&QFunction>,
    gen: Option<&ControlGenerator>,
    base: &Policy,
    cfg: &ImprovementConfig,
) -> Result<Improvement> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::InvalidArgument("cannot improve from an empty dataset".into()));
    }
    base.check_shape(env.num_states(), env.num_actions())?;
    let dual = match cfg.mode {
        Mode::Standard => None,
        Mode::Dual => Some((
            q_coarse.ok_or_else(|| Error::InvalidArgument("dual mode needs a coarse critic".into()))?,
            gen.ok_or_else(|| Error::InvalidArgument("dual mode needs a control generator".into()))?,
        )),
    };
    let mut current = base.clone();
    let mut out = None;
    for pass in 0..cfg.passes {
        let pass_seed = crate::rng::derive_seed(cfg.seed, pass as u64);
        let picks = par::try_map_range(d.len(), |i| -> Result<(StateId, ActionId, usize)> {
            let s = d.transitions[i].s;
            let mut rng = sub_rng(pass_seed, i as u64);
            let cands = match dual {
                None => sample_candidates(Source::Policy(&current), s, None, cfg.num_candidates, &mut rng)?,
                Some((qc, g)) => {
                    let c = best_category(qc, s)?;
                    sample_candidates(Source::Generator(g), s, Some(c), cfg.num_candidates, &mut rng)?
                }
            };
            let unvisited = cands.actions.iter().filter(|&&a| !q_fine.is_visited(s, a)).count();
            Ok((s, best_action(q_fine, &cands)?, unvisited))
        })?;
        let choices: Vec<(StateId, ActionId)> = picks.iter().map(|x| (x.0, x.1)).collect();
        let unvisited_queries = picks.iter().map(|x| x.2).sum();
        let policy = clone_policy(&choices, env.num_states(), env.num_actions(), cfg.cloning_smoothing)?;
        current = policy.clone();
        out = Some(Improvement {
            policy,
            choices,
            unvisited_queries,
        });
    }
    Ok(out.expect("passes >= 1"))
}

/// Text table of `state<TAB>action<TAB>probability` rows.
pub fn policy_to_text(pi: &Policy) -> String {
    let mut out = format!("#dualq-policy\tstates={}\tchoices={}\n", pi.num_states(), pi.num_choices());
    for s in 0..pi.num_states() {
        for (a, p) in pi.row(s).iter().enumerate() {
            let _ = writeln!(out, "{s}\t{a}\t{p:?}");
        }
    }
    out
}

pub fn policy_from_text(text: &str, origin: &str) -> Result<Policy> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(origin, 1, "empty file"))?;
    let mut fields = header.split('\t');
    if fields.next() != Some("#dualq-policy") {
        return Err(Error::parse(origin, 1, "missing policy header"));
    }
    let (mut ns, mut nc) = (None, None);
    for f in fields {
        match f.split_once('=') {
            Some(("states", v)) => ns = v.parse::<usize>().ok(),
            Some(("choices", v)) => nc = v.parse::<usize>().ok(),
            _ => return Err(Error::parse(origin, 1, format!("bad header field `{f}`"))),
        }
    }
    let (Some(ns), Some(nc)) = (ns, nc) else {
        return Err(Error::parse(origin, 1, "incomplete policy header"));
    };
    let mut probs = vec![f64::NAN; ns * nc];
    for (i, raw) in lines {
        if raw.is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split('\t').collect();
        let parsed = match f.as_slice() {
            [s, a, p] => s.parse::<usize>().ok().zip(a.parse::<usize>().ok()).zip(p.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(((s, a), p)) if s < ns && a < nc => probs[s * nc + a] = p,
            _ => return Err(Error::parse(origin, i + 1, "expected state, action, probability")),
        }
    }
    if probs.iter().any(|x| x.is_nan()) {
        return Err(Error::parse(origin, 0, "policy file does not list every pair"));
    }
    Policy::new(ns, nc, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Granularity, Transition};
    use crate::mdp::ActionValueTable;
    use crate::rng::rng_from;

    fn dataset(pairs: &[(usize, usize)]) -> Dataset {
        Dataset {
            granularity: Granularity::Fine,
            transitions: pairs
                .iter()
                .enumerate()
                .map(|(i, &(s, a))| Transition {
                    episode_id: i as u64,
                    t: 0,
                    s,
                    a,
                    r: 0.0,
                    s_next: s,
                    a_next: None,
                    done: true,
                })
                .collect(),
            env_fingerprint: String::new(),
            behavior: "hand".into(),
        }
    }

    fn two_blocks() -> Classifier {
        Classifier::new(vec![0, 0, 1, 1], 2).unwrap()
    }

    #[test]
    fn generator_point_mass_and_counts() {
        let g = fit_control_generator(&dataset(&[(0, 1)]), &two_blocks(), 1, 1.0, 0.0).unwrap();
        assert_eq!(g.conditional(0, 0).unwrap(), &[0.0, 1.0]);
        // unseen pair falls back to uniform
        assert_eq!(g.conditional(0, 1).unwrap(), &[0.5, 0.5]);
        let g = fit_control_generator(&dataset(&[(0, 2), (0, 2), (0, 2), (0, 3)]), &two_blocks(), 1, 1.0, 0.0).unwrap();
        let p = g.conditional(0, 1).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn hot_temperature_flattens() {
        let g = fit_control_generator(&dataset(&[(0, 2), (0, 2), (0, 2), (0, 3)]), &two_blocks(), 1, 1e6, 0.0).unwrap();
        for &p in g.conditional(0, 1).unwrap() {
            assert!((p - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn tie_rules() {
        let q = QFunction::from_table(
            &ActionValueTable::new(2, 3, vec![0.1, 0.9, 0.3, 0.5, 0.5, 0.0]).unwrap(),
            Granularity::Coarse,
        );
        assert_eq!(best_category(&q, 0).unwrap(), 1);
        assert_eq!(best_category(&q, 1).unwrap(), 0);
        let qf = QFunction::from_table(
            &ActionValueTable::new(1, 4, vec![0.0, 2.0, 5.0, 5.0]).unwrap(),
            Granularity::Fine,
        );
        let c = CandidateSet {
            state: 0,
            actions: vec![3, 1, 2],
        };
        assert_eq!(best_action(&qf, &c).unwrap(), 2);
        let single = CandidateSet {
            state: 0,
            actions: vec![1],
        };
        assert_eq!(best_action(&qf, &single).unwrap(), 1);
    }

    #[test]
    fn cloning_mle() {
        let pi = clone_policy(&[(1, 3)], 2, 4, 0.0).unwrap();
        assert_eq!(pi.prob(1, 3), 1.0);
        assert_eq!(pi.row(0), &[0.25; 4]);
        let pi = clone_policy(&[(0, 0), (0, 0), (0, 1)], 1, 2, 0.0).unwrap();
        assert!((pi.prob(0, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn source_category_pairing_enforced() {
        let pi = Policy::uniform(1, 4);
        let g = fit_control_generator(&dataset(&[(0, 1)]), &two_blocks(), 1, 1.0, 0.0).unwrap();
        let mut rng = rng_from(0);
        assert!(sample_candidates(Source::Policy(&pi), 0, Some(0), 2, &mut rng).is_err());
        assert!(sample_candidates(Source::Generator(&g), 0, None, 2, &mut rng).is_err());
        assert!(matches!(
            sample_candidates(Source::Generator(&g), 0, Some(5), 2, &mut rng),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn policy_text_round_trip() {
        let pi = Policy::from_weights(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(policy_from_text(&policy_to_text(&pi), "mem").unwrap(), pi);
    }
}

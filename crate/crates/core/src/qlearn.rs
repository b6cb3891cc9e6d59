//! One-step fitted policy evaluation for fine and coarse critics.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Granularity, Transition};
use crate::error::{Error, Result};
use crate::mdp::{ActionValueTable, CategoryId, EnvSpec, StateId};
use crate::rng::sub_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backing {
    Tabular,
    /// One-hot `(s, a)` plus `(s, category(a))` features for fine critics;
    /// one-hot `(s, c)` plus per-state features for coarse critics.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetUpdateMode {
    /// Copy params into the target every `target_sync_interval` steps.
    Hard,
    /// `target += polyak_rate * (params - target)` after every step.
    Polyak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub backing: Backing,
    pub learning_rate: f64,
    pub discount: f64,
    pub target_sync_interval: u64,
    pub target_update_mode: TargetUpdateMode,
    pub polyak_rate: f64,
    pub batch_size: usize,
    pub convergence_delta: f64,
    pub convergence_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            backing: Backing::Tabular,
            learning_rate: 0.1,
            discount: 0.5,
            target_sync_interval: 30,
            target_update_mode: TargetUpdateMode::Hard,
            polyak_rate: 2.4e-5,
            batch_size: 32,
            convergence_delta: 0.01,
            convergence_patience: 10,
            max_epochs: 200,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::Config("discount must lie strictly inside (0, 1)".into()));
        }
        if self.target_sync_interval == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "target_sync_interval, batch_size and max_epochs must be positive".into(),
            ));
        }
        if !(self.polyak_rate > 0.0 && self.polyak_rate <= 1.0) {
            return Err(Error::Config("polyak_rate must lie in (0, 1]".into()));
        }
        if !(self.convergence_delta > 0.0) || self.convergence_patience == 0 {
            return Err(Error::Config("convergence_delta and convergence_patience must be positive".into()));
        }
        Ok(())
    }
}

/// Action-value estimator over `(state, choice)` pairs, where a choice is a
/// fine action or a category depending on `granularity`.
#[derive(Clone, Debug, PartialEq)]
pub struct QFunction {
    granularity: Granularity,
    backing: Backing,
    num_states: usize,
    num_choices: usize,
    /// Category of each fine action (linear fine backing only).
    categories: Vec<CategoryId>,
    num_categories: usize,
    params: Vec<f64>,
    target_params: Vec<f64>,
    step_counter: u64,
    visited: Vec<bool>,
    /// Per-epoch mean TD loss recorded by the fit.
    pub loss_history: Vec<f64>,
    pub converged: bool,
}

impl QFunction {
    pub fn new(env: &EnvSpec, granularity: Granularity, backing: Backing) -> Self {
        let ns = env.num_states();
        let (nchoice, dim) = match (granularity, backing) {
            (Granularity::Fine, Backing::Tabular) => (env.num_actions(), ns * env.num_actions()),
            (Granularity::Fine, Backing::Linear) => {
                (env.num_actions(), ns * env.num_actions() + ns * env.num_categories())
            }
            (Granularity::Coarse, Backing::Tabular) => (env.num_categories(), ns * env.num_categories()),
            (Granularity::Coarse, Backing::Linear) => {
                (env.num_categories(), ns * env.num_categories() + ns)
            }
        };
        QFunction {
            granularity,
            backing,
            num_states: ns,
            num_choices: nchoice,
            categories: env.action_categories().to_vec(),
            num_categories: env.num_categories(),
            params: vec![0.0; dim],
            target_params: vec![0.0; dim],
            step_counter: 0,
            visited: vec![false; ns * nchoice],
            loss_history: Vec::new(),
            converged: false,
        }
    }

    /// Tabular critic holding the given table in both params and target.
    pub fn from_table(table: &ActionValueTable, granularity: Granularity) -> Self {
        QFunction {
            granularity,
            backing: Backing::Tabular,
            num_states: table.num_states(),
            num_choices: table.num_actions(),
            categories: Vec::new(),
            num_categories: 0,
            params: table.as_slice().to_vec(),
            target_params: table.as_slice().to_vec(),
            step_counter: 0,
            visited: vec![true; table.as_slice().len()],
            loss_history: Vec::new(),
            converged: true,
        }
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn backing(&self) -> Backing {
        self.backing
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_choices(&self) -> usize {
        self.num_choices
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn target_params(&self) -> &[f64] {
        &self.target_params
    }

    pub fn step_counter(&self) -> u64 {
        self.step_counter
    }

    fn features(&self, s: StateId, a: usize) -> ([usize; 2], usize) {
        let n = self.num_choices;
        match (self.backing, self.granularity) {
            (Backing::Tabular, _) => ([s * n + a, 0], 1),
            (Backing::Linear, Granularity::Fine) => (
                [s * n + a, self.num_states * n + s * self.num_categories + self.categories[a]],
                2,
            ),
            (Backing::Linear, Granularity::Coarse) => ([s * n + a, self.num_states * n + s], 2),
        }
    }

    fn eval(&self, w: &[f64], s: StateId, a: usize) -> f64 {
        let (f, k) = self.features(s, a);
        f[..k].iter().map(|&i| w[i]).sum()
    }

    fn check(&self, s: StateId, a: usize) -> Result<()> {
        if s >= self.num_states || a >= self.num_choices {
            return Err(Error::Domain(format!(
                "({s}, {a}) outside the critic's {}x{} domain",
                self.num_states, self.num_choices
            )));
        }
        Ok(())
    }

    pub fn value(&self, s: StateId, a: usize) -> Result<f64> {
        self.check(s, a)?;
        Ok(self.eval(&self.params, s, a))
    }

    pub fn target_value(&self, s: StateId, a: usize) -> Result<f64> {
        self.check(s, a)?;
        Ok(self.eval(&self.target_params, s, a))
    }

    /// Whether `(s, a)` was a training input. Linear critics generalize, so
    /// only tabular critics can report unvisited entries.
    pub fn is_visited(&self, s: StateId, a: usize) -> bool {
        self.backing == Backing::Linear || self.visited.get(s * self.num_choices + a).copied().unwrap_or(false)
    }

    pub fn row(&self, s: StateId) -> Result<Vec<f64>> {
        (0..self.num_choices).map(|a| self.value(s, a)).collect()
    }

    pub fn to_table(&self) -> ActionValueTable {
        let q: Vec<f64> = (0..self.num_states)
            .flat_map(|s| (0..self.num_choices).map(move |a| (s, a)))
            .map(|(s, a)| self.eval(&self.params, s, a))
            .collect();
        ActionValueTable::new(self.num_states, self.num_choices, q).expect("finite by construction")
    }

    fn sync_target(&mut self, cfg: &FitConfig) {
        match cfg.target_update_mode {
            TargetUpdateMode::Hard => {
                if self.step_counter.is_multiple_of(cfg.target_sync_interval) {
                    self.target_params.copy_from_slice(&self.params);
                }
            }
            TargetUpdateMode::Polyak => {
                let tau = cfg.polyak_rate;
                for (t, p) in self.target_params.iter_mut().zip(&self.params) {
                    *t += tau * (p - *t);
                }
            }
        }
    }

    /// Text form: a header line, then `state<TAB>choice<TAB>value` for every pair.
    pub fn to_text(&self) -> String {
        let g = match self.granularity {
            Granularity::Fine => "fine",
            Granularity::Coarse => "coarse",
        };
        let mut out = format!(
            "#dualq-q\tgranularity={g}\tstates={}\tchoices={}\n",
            self.num_states, self.num_choices
        );
        for s in 0..self.num_states {
            for a in 0..self.num_choices {
                let _ = writeln!(out, "{s}\t{a}\t{:?}", self.eval(&self.params, s, a));
            }
        }
        out
    }

    /// Parses [`QFunction::to_text`] output into a tabular critic.
    pub fn from_text(text: &str, origin: &str) -> Result<QFunction> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(origin, 1, "empty file"))?;
        let mut fields = header.split('\t');
        if fields.next() != Some("#dualq-q") {
            return Err(Error::parse(origin, 1, "missing critic header"));
        }
        let (mut g, mut ns, mut nc) = (None, None, None);
        for f in fields {
            match f.split_once('=') {
                Some(("granularity", "fine")) => g = Some(Granularity::Fine),
                Some(("granularity", "coarse")) => g = Some(Granularity::Coarse),
                Some(("states", v)) => ns = v.parse::<usize>().ok(),
                Some(("choices", v)) => nc = v.parse::<usize>().ok(),
                _ => return Err(Error::parse(origin, 1, format!("bad header field `{f}`"))),
            }
        }
        let (Some(g), Some(ns), Some(nc)) = (g, ns, nc) else {
            return Err(Error::parse(origin, 1, "incomplete critic header"));
        };
        let mut q = vec![f64::NAN; ns * nc];
        for (i, raw) in lines {
            if raw.is_empty() {
                continue;
            }
            let line = i + 1;
            let f: Vec<&str> = raw.split('\t').collect();
            let parsed = match f.as_slice() {
                [s, a, v] => s.parse::<usize>().ok().zip(a.parse::<usize>().ok()).zip(v.parse::<f64>().ok()),
                _ => None,
            };
            let ((s, a), v) = parsed.ok_or_else(|| Error::parse(origin, line, "expected state, choice, value"))?;
            if s >= ns || a >= nc || !v.is_finite() {
                return Err(Error::parse(origin, line, "entry out of range or non-finite"));
            }
            q[s * nc + a] = v;
        }
        if q.iter().any(|x| x.is_nan()) {
            return Err(Error::parse(origin, 0, "critic file does not list every pair"));
        }
        Ok(QFunction::from_table(&ActionValueTable::new(ns, nc, q)?, g))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<QFunction> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        QFunction::from_text(&text, &path.display().to_string())
    }
}

/// One TD step toward `r + gamma * Q_target(s', a')` (`r` alone when done).
///
/// Returns the mean squared TD error before the update. Tabular entries move
/// by `lr * (mean target - Q)` over the batch rows that hit them; linear
/// weights take a gradient step on the batch mean squared error.
pub fn td_step(q: &mut QFunction, batch: &[&Transition], cfg: &FitConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut errs = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for t in batch {
        q.check(t.s, t.a)?;
        let boot = match (t.done, t.a_next) {
            (true, _) | (false, None) => 0.0,
            (false, Some(a2)) => q.target_value(t.s_next, a2)?,
        };
        let target = t.r + cfg.discount * boot;
        if !target.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite TD target for transition (episode {}, t {})",
                t.episode_id, t.t
            )));
        }
        let err = target - q.eval(&q.params, t.s, t.a);
        loss += err * err;
        errs.push(err);
    }
    let n = batch.len() as f64;
    loss /= n;
    match q.backing {
        Backing::Tabular => {
            // per entry: sum of errors and hit count; dense for large batches
            let mut acc: Vec<(usize, f64, u32)> = if 4 * batch.len() >= q.params.len() {
                let mut dense = vec![(0.0, 0u32); q.params.len()];
                for (t, err) in batch.iter().zip(&errs) {
                    let e = &mut dense[t.s * q.num_choices + t.a];
                    e.0 += err;
                    e.1 += 1;
                }
                dense
                    .into_iter()
                    .enumerate()
                    .filter(|x| x.1 .1 > 0)
                    .map(|(i, (sum, cnt))| (i, sum, cnt))
                    .collect()
            } else {
                batch
                    .iter()
                    .zip(&errs)
                    .map(|(t, err)| (t.s * q.num_choices + t.a, *err, 1))
                    .collect()
            };
            acc.sort_by_key(|x| x.0);
            let mut i = 0;
            while i < acc.len() {
                let idx = acc[i].0;
                let (mut sum, mut cnt) = (0.0, 0u32);
                while i < acc.len() && acc[i].0 == idx {
                    sum += acc[i].1;
                    cnt += acc[i].2;
                    i += 1;
                }
                q.params[idx] += cfg.learning_rate * sum / f64::from(cnt);
                q.visited[idx] = true;
            }
        }
        Backing::Linear => {
            let mut grad = vec![0.0; q.params.len()];
            for (t, err) in batch.iter().zip(&errs) {
                let (f, k) = q.features(t.s, t.a);
                for &i in &f[..k] {
                    grad[i] += err / n;
                }
                q.visited[t.s * q.num_choices + t.a] = true;
            }
            for (w, g) in q.params.iter_mut().zip(grad) {
                *w += cfg.learning_rate * g;
            }
        }
    }
    if q.params.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("critic parameters diverged".into()));
    }
    q.step_counter += 1;
    q.sync_target(cfg);
    Ok(loss)
}

/// True iff the last `patience` absolute epoch-to-epoch loss changes are all `< delta`.
pub fn check_convergence(loss_history: &[f64], delta: f64, patience: usize) -> bool {
    if patience == 0 || loss_history.len() < patience + 1 {
        return false;
    }
    loss_history[loss_history.len() - patience - 1..]
        .windows(2)
        .all(|w| (w[1] - w[0]).abs() < delta)
}

/// Every bootstrapped `(s', a')` must also be a trained `(s, a)` pair.
fn assert_in_distribution(d: &Dataset) -> Result<()> {
    let seen: HashSet<(StateId, usize)> = d.transitions.iter().map(|t| (t.s, t.a)).collect();
    for t in &d.transitions {
        if let (false, Some(a2)) = (t.done, t.a_next) {
            if !seen.contains(&(t.s_next, a2)) {
                return Err(Error::Domain(format!(
                    "transition (episode {}, t {}) bootstraps from ({}, {a2}), which the dataset never trains",
                    t.episode_id, t.t, t.s_next
                )));
            }
        }
    }
    Ok(())
}

fn fit(d: &Dataset, env: &EnvSpec, cfg: &FitConfig, granularity: Granularity) -> Result<QFunction> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::InvalidArgument("cannot fit a critic on an empty dataset".into()));
    }
    if d.granularity != granularity {
        return Err(Error::InvalidArgument(format!(
            "expected a {granularity:?} dataset, got {:?}",
            d.granularity
        )));
    }
    if d.env_fingerprint != env.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: env.fingerprint(),
            found: d.env_fingerprint.clone(),
        });
    }
    assert_in_distribution(d)?;
    let mut q = QFunction::new(env, granularity, cfg.backing);
    let mut order: Vec<usize> = (0..d.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut sub_rng(cfg.seed, epoch as u64));
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Transition> = chunk.iter().map(|&i| &d.transitions[i]).collect();
            total += td_step(&mut q, &batch, cfg)?;
            steps += 1;
        }
        q.loss_history.push(total / steps as f64);
        if check_convergence(&q.loss_history, cfg.convergence_delta, cfg.convergence_patience) {
            q.converged = true;
            break;
        }
    }
    Ok(q)
}

/// Fine critic `Q_theta(s, a)` from a fine dataset. Returns with
/// `converged == false` when `max_epochs` runs out first.
pub fn fit_fine_q(d: &Dataset, env: &EnvSpec, cfg: &FitConfig) -> Result<QFunction> {
    fit(d, env, cfg, Granularity::Fine)
}

/// Coarse critic `Q_phi(s, c)` from a coarsened dataset.
pub fn fit_coarse_q(dc: &Dataset, env: &EnvSpec, cfg: &FitConfig) -> Result<QFunction> {
    fit(dc, env, cfg, Granularity::Coarse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::EnvParts;

    fn loop_env() -> EnvSpec {
        EnvSpec::new(EnvParts {
            name: "loop".into(),
            num_states: 2,
            num_actions: 2,
            num_categories: 1,
            action_category: vec![0, 0],
            transitions: vec![vec![(1, 1.0)], vec![(1, 1.0)], vec![(0, 1.0)], vec![(0, 1.0)]],
            rewards: vec![1.0, 0.0, 0.0, 0.0],
            discount: 0.5,
            terminal_states: vec![],
            initial: vec![(0, 1.0)],
            horizon: 5,
            tokens: None,
        })
        .unwrap()
    }

    fn tr(s: usize, a: usize, r: f64, s2: usize, a2: Option<usize>) -> Transition {
        Transition {
            episode_id: 0,
            t: 0,
            s,
            a,
            r,
            s_next: s2,
            a_next: a2,
            done: a2.is_none(),
        }
    }

    #[test]
    fn single_step_delta_rule() {
        let env = loop_env();
        let mut q = QFunction::new(&env, Granularity::Fine, Backing::Tabular);
        q.target_params[3] = 1.0;
        let cfg = FitConfig {
            learning_rate: 0.5,
            ..Default::default()
        };
        let t = tr(0, 0, 1.0, 1, Some(1));
        let loss = td_step(&mut q, &[&t], &cfg).unwrap();
        assert_eq!(loss, 2.25);
        assert_eq!(q.value(0, 0).unwrap(), 0.75);
    }

    #[test]
    fn done_target_ignores_bootstrap() {
        let env = loop_env();
        let mut q = QFunction::new(&env, Granularity::Fine, Backing::Tabular);
        q.target_params.iter_mut().for_each(|x| *x = 100.0);
        let cfg = FitConfig {
            learning_rate: 1.0,
            ..Default::default()
        };
        td_step(&mut q, &[&tr(0, 1, 2.0, 1, None)], &cfg).unwrap();
        assert_eq!(q.value(0, 1).unwrap(), 2.0);
    }

    #[test]
    fn hard_sync_schedule() {
        let env = loop_env();
        let mut q = QFunction::new(&env, Granularity::Fine, Backing::Tabular);
        let cfg = FitConfig::default();
        let t = tr(0, 0, 1.0, 1, Some(0));
        for step in 1..=60u64 {
            let before = q.target_params.clone();
            td_step(&mut q, &[&t], &cfg).unwrap();
            if step % 30 == 0 {
                assert_eq!(q.target_params, q.params);
            } else {
                assert_eq!(q.target_params, before);
            }
        }
    }

    #[test]
    fn convergence_rule_fixtures() {
        let mut h = vec![1.0];
        for _ in 0..10 {
            let last = *h.last().unwrap();
            h.push(last - 0.009);
        }
        assert!(check_convergence(&h, 0.01, 10));
        let mut h2 = vec![1.0, 0.98];
        for _ in 0..9 {
            let last = *h2.last().unwrap();
            h2.push(last - 0.009);
        }
        assert!(!check_convergence(&h2, 0.01, 10));
        assert!(!check_convergence(&[1.0; 10], 0.01, 10));
    }

    #[test]
    fn text_round_trip() {
        let env = loop_env();
        let mut q = QFunction::new(&env, Granularity::Fine, Backing::Tabular);
        q.params = vec![0.1, -2.5, 1.0 / 3.0, 7.0];
        let back = QFunction::from_text(&q.to_text(), "mem").unwrap();
        assert_eq!(back.to_table(), q.to_table());
        assert!(QFunction::from_text("#dualq-q\tgranularity=fine\tstates=1\tchoices=2\n0\t0\t1.0\n", "m").is_err());
    }

    #[test]
    fn ood_bootstrap_rejected() {
        let env = loop_env();
        let d = Dataset {
            granularity: Granularity::Fine,
            transitions: vec![tr(0, 0, 1.0, 1, Some(1))],
            env_fingerprint: env.fingerprint(),
            behavior: "hand".into(),
        };
        assert!(matches!(fit_fine_q(&d, &env, &FitConfig::default()), Err(Error::Domain(_))));
    }
}

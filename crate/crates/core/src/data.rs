//! Behavior policies, logged SARSA datasets, coarsening and persistence.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::envs::Classifier;
use crate::error::{Error, Result};
use crate::mdp::{value_iteration, ActionId, EnvSpec, Policy, StateId};
use crate::par;
use crate::rng::{sample_index, sample_sparse, sub_rng};

/// Whether a dataset's action columns hold fine actions or categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Granularity {
    Fine,
    Coarse,
}

impl Granularity {
    fn as_str(self) -> &'static str {
        match self {
            Granularity::Fine => "fine",
            Granularity::Coarse => "coarse",
        }
    }
}

/// One logged `(s, a, r, s', a')` tuple. For coarse datasets `a` and
/// `a_next` are category ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub episode_id: u64,
    pub t: u32,
    pub s: StateId,
    pub a: ActionId,
    pub r: f64,
    pub s_next: StateId,
    pub a_next: Option<ActionId>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub granularity: Granularity,
    pub transitions: Vec<Transition>,
    pub env_fingerprint: String,
    pub behavior: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn reward_sum(&self) -> f64 {
        self.transitions.iter().map(|t| t.r).sum()
    }

    /// `(s, a)` pairs, in dataset order.
    pub fn state_actions(&self) -> Vec<(StateId, ActionId)> {
        self.transitions.iter().map(|t| (t.s, t.a)).collect()
    }
}

/// `quality * greedy(V*) + (1 - quality) * uniform`, then smoothed so every
/// action keeps at least `epsilon / |A|` probability.
pub fn make_behavior_policy(env: &EnvSpec, quality: f64, epsilon: f64) -> Result<Policy> {
    if !(0.0..=1.0).contains(&quality) {
        return Err(Error::InvalidArgument(format!("quality {quality} outside [0, 1]")));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} must lie in (0, 1]; zero would leave actions uncovered"
        )));
    }
    let (_, greedy) = value_iteration(env, 1e-10)?;
    let na = env.num_actions();
    let uniform = 1.0 / na as f64;
    let probs: Vec<f64> = greedy
        .as_slice()
        .iter()
        .map(|&g| {
            let mix = quality * g + (1.0 - quality) * uniform;
            (1.0 - epsilon) * mix + epsilon * uniform
        })
        .collect();
    Policy::from_weights(env.num_states(), na, probs)
}

/// Rolls `episodes` episodes of at most `horizon` steps under `pi_beta`.
///
/// Each episode draws from its own stream `(seed, episode_id)`, so the result
/// does not depend on scheduling. `a_next` is drawn from `pi_beta` at the
/// successor; the last step of an episode (terminal successor or horizon
/// reached) is marked `done` and carries no `a_next`.
pub fn collect_dataset(
    env: &EnvSpec,
    pi_beta: &Policy,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    if episodes == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("episodes and horizon must be >= 1".into()));
    }
    if env.non_terminal_states().next().is_none() {
        return Err(Error::InvalidEnv("every state is terminal".into()));
    }
    pi_beta.check_shape(env.num_states(), env.num_actions())?;
    let per_episode = par::map_range(episodes, |ep| {
        let mut rng = sub_rng(seed, ep as u64);
        let mut out = Vec::new();
        let mut s = sample_sparse(env.initial(), &mut rng);
        if env.is_terminal(s) {
            return out;
        }
        let mut a = sample_index(pi_beta.row(s), &mut rng);
        for t in 0..horizon {
            let s_next = sample_sparse(env.transition(s, a), &mut rng);
            let done = env.is_terminal(s_next) || t + 1 == horizon;
            let a_next = (!done).then(|| sample_index(pi_beta.row(s_next), &mut rng));
            out.push(Transition {
                episode_id: ep as u64,
                t: t as u32,
                s,
                a,
                r: env.reward(s, a),
                s_next,
                a_next,
                done,
            });
            match a_next {
                Some(next) => {
                    s = s_next;
                    a = next;
                }
                None => break,
            }
        }
        out
    });
    Ok(Dataset {
        granularity: Granularity::Fine,
        transitions: per_episode.into_iter().flatten().collect(),
        env_fingerprint: env.fingerprint(),
        behavior: format!("rollout(episodes={episodes},horizon={horizon},seed={seed})"),
    })
}

fn as_count(p: f64, resolution: u32, what: &str) -> Result<usize> {
    let scaled = p * f64::from(resolution);
    let n = scaled.round();
    if (scaled - n).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "{what} = {p} is not a multiple of 1/{resolution}"
        )));
    }
    Ok(n as usize)
}

/// Rounds a probability row to multiples of `1/resolution` by largest
/// remainder, keeping every positive entry at least `1/resolution` when
/// `keep_support` is set. Returns integer counts summing to `resolution`.
pub fn quantize_row(probs: &[f64], resolution: u32, keep_support: bool) -> Result<Vec<u32>> {
    let res = f64::from(resolution);
    let support = probs.iter().filter(|&&p| p > 0.0).count() as u32;
    if resolution == 0 || (keep_support && support > resolution) {
        return Err(Error::InvalidArgument(format!(
            "resolution {resolution} cannot represent a row with {support} positive entries"
        )));
    }
    let mut counts: Vec<u32> = probs
        .iter()
        .map(|&p| {
            let floor = (p * res).floor() as u32;
            if keep_support && p > 0.0 { floor.max(1) } else { floor }
        })
        .collect();
    let mut total: u32 = counts.iter().sum();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = probs[i] * res - f64::from(counts[i]);
        let rj = probs[j] * res - f64::from(counts[j]);
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in order.iter().cycle() {
        if total == resolution {
            break;
        }
        if total < resolution {
            if probs[i] > 0.0 || !keep_support {
                counts[i] += 1;
                total += 1;
            }
        } else if counts[i] > u32::from(keep_support && probs[i] > 0.0) {
            counts[i] -= 1;
            total -= 1;
        }
    }
    Ok(counts)
}

/// Copy of `env` whose transition probabilities are multiples of `1/resolution`.
pub fn quantize_env(env: &EnvSpec, resolution: u32) -> Result<EnvSpec> {
    let mut parts = env.parts().clone();
    for row in parts.transitions.iter_mut() {
        let probs: Vec<f64> = row.iter().map(|x| x.1).collect();
        let counts = quantize_row(&probs, resolution, true)?;
        *row = row
            .iter()
            .zip(counts)
            .map(|(&(s, _), n)| (s, f64::from(n) / f64::from(resolution)))
            .collect();
    }
    EnvSpec::new(parts)
}

/// Copy of `pi` whose rows are multiples of `1/resolution`, support kept.
pub fn quantize_policy(pi: &Policy, resolution: u32) -> Result<Policy> {
    let mut probs = Vec::with_capacity(pi.as_slice().len());
    for s in 0..pi.num_states() {
        let counts = quantize_row(pi.row(s), resolution, true)?;
        probs.extend(counts.into_iter().map(|n| f64::from(n) / f64::from(resolution)));
    }
    Policy::new(pi.num_states(), pi.num_choices(), probs)
}

/// Full-coverage dataset whose empirical conditionals equal the model exactly.
///
/// Each non-terminal `(s, a)` appears with multiplicity proportional to
/// `pi(a|s)`, each successor `s'` proportional to `T(s'|s,a)` and each next
/// action proportional to `pi(a'|s')`. All of these probabilities must be
/// multiples of `1/resolution` (see [`quantize_env`], [`quantize_policy`]).
/// Every tuple is its own one-step episode.
pub fn exhaustive_dataset(env: &EnvSpec, pi: &Policy, resolution: u32) -> Result<Dataset> {
    pi.check_shape(env.num_states(), env.num_actions())?;
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let res = resolution as usize;
    let mut transitions = Vec::new();
    for s in env.non_terminal_states() {
        for a in 0..env.num_actions() {
            let n_a = as_count(pi.prob(s, a), resolution, &format!("pi({a}|{s})"))?;
            if n_a == 0 {
                continue;
            }
            for &(s_next, p) in env.transition(s, a) {
                let n_t = as_count(p, resolution, &format!("T({s_next}|{s},{a})"))?;
                let nexts: Vec<(Option<ActionId>, usize)> = if env.is_terminal(s_next) {
                    vec![(None, res)]
                } else {
                    let mut v = Vec::new();
                    for (a2, &q) in pi.row(s_next).iter().enumerate() {
                        let n = as_count(q, resolution, &format!("pi({a2}|{s_next})"))?;
                        if n > 0 {
                            v.push((Some(a2), n));
                        }
                    }
                    v
                };
                for (a_next, n_next) in nexts {
                    for _ in 0..n_a * n_t * n_next {
                        transitions.push(Transition {
                            episode_id: transitions.len() as u64,
                            t: 0,
                            s,
                            a,
                            r: env.reward(s, a),
                            s_next,
                            a_next,
                            done: a_next.is_none(),
                        });
                    }
                }
            }
        }
    }
    Ok(Dataset {
        granularity: Granularity::Fine,
        transitions,
        env_fingerprint: env.fingerprint(),
        behavior: format!("exhaustive(resolution={resolution})"),
    })
}

/// Replaces actions by their categories; everything else is kept as is.
pub fn coarsen_dataset(d: &Dataset, f: &Classifier) -> Result<Dataset> {
    if d.granularity != Granularity::Fine {
        return Err(Error::InvalidArgument("dataset is already coarse".into()));
    }
    let mut transitions = Vec::with_capacity(d.len());
    for (i, t) in d.transitions.iter().enumerate() {
        let wrap = |e: Error| Error::Domain(format!("transition {i} (episode {}, t {}): {e}", t.episode_id, t.t));
        let a = f.classify(t.a).map_err(wrap)?;
        let a_next = t.a_next.map(|x| f.classify(x)).transpose().map_err(wrap)?;
        transitions.push(Transition { a, a_next, ..t.clone() });
    }
    Ok(Dataset {
        granularity: Granularity::Coarse,
        transitions,
        env_fingerprint: d.env_fingerprint.clone(),
        behavior: d.behavior.clone(),
    })
}

const HEADER_TAG: &str = "#dualq-dataset";

fn sanitize(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

fn encode_action(env_tokens: Option<&[Vec<String>]>, a: ActionId) -> String {
    match env_tokens {
        Some(resp) => format!("\"{}\"", resp[a].join(" ")),
        None => a.to_string(),
    }
}

/// Renders the dataset in its line format (see [`save_dataset`]).
pub fn dataset_to_string(d: &Dataset, env: &EnvSpec) -> String {
    let tokens = match d.granularity {
        Granularity::Fine => env.tokens().map(|t| t.responses.as_slice()),
        Granularity::Coarse => None,
    };
    let mut out = String::with_capacity(d.len() * 48);
    let _ = writeln!(
        out,
        "{HEADER_TAG}\tgranularity={}\tfingerprint={}\tbehavior={}",
        d.granularity.as_str(),
        d.env_fingerprint,
        sanitize(&d.behavior)
    );
    for t in &d.transitions {
        let a_next = t.a_next.map_or("-".to_string(), |x| encode_action(tokens, x));
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:?}\t{}\t{}\t{}",
            t.episode_id,
            t.t,
            t.s,
            encode_action(tokens, t.a),
            t.r,
            t.s_next,
            a_next,
            u8::from(t.done)
        );
    }
    out
}

/// Writes one transition per line, tab separated:
/// `episode_id t s a r s_next a_next done`, after a header line carrying the
/// granularity, env fingerprint and behavior descriptor. Token-env actions
/// are written as quoted, space-joined responses; a missing `a_next` is `-`.
pub fn save_dataset(d: &Dataset, env: &EnvSpec, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_string(d, env)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path, env: &EnvSpec) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, env, &path.display().to_string())
}

pub fn parse_dataset(text: &str, env: &EnvSpec, origin: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(origin, 1, "empty file"))?;
    let mut fields = header.split('\t');
    if fields.next() != Some(HEADER_TAG) {
        return Err(Error::parse(origin, 1, "missing dataset header"));
    }
    let mut granularity = None;
    let mut fingerprint = None;
    let mut behavior = String::new();
    for f in fields {
        match f.split_once('=') {
            Some(("granularity", "fine")) => granularity = Some(Granularity::Fine),
            Some(("granularity", "coarse")) => granularity = Some(Granularity::Coarse),
            Some(("fingerprint", v)) => fingerprint = Some(v.to_string()),
            Some(("behavior", v)) => behavior = v.to_string(),
            _ => return Err(Error::parse(origin, 1, format!("bad header field `{f}`"))),
        }
    }
    let granularity = granularity.ok_or_else(|| Error::parse(origin, 1, "header lacks granularity"))?;
    let fingerprint = fingerprint.ok_or_else(|| Error::parse(origin, 1, "header lacks fingerprint"))?;
    let expected = env.fingerprint();
    if fingerprint != expected {
        return Err(Error::FingerprintMismatch {
            expected,
            found: fingerprint,
        });
    }
    let n_choices = match granularity {
        Granularity::Fine => env.num_actions(),
        Granularity::Coarse => env.num_categories(),
    };
    let lookup: Option<HashMap<String, ActionId>> = match (granularity, env.tokens()) {
        (Granularity::Fine, Some(tok)) => Some(
            tok.responses
                .iter()
                .enumerate()
                .map(|(a, r)| (r.join(" "), a))
                .collect(),
        ),
        _ => None,
    };
    let parse_action = |field: &str, line: usize| -> Result<ActionId> {
        let a = match &lookup {
            Some(map) => {
                let inner = field
                    .strip_prefix('"')
                    .and_then(|x| x.strip_suffix('"'))
                    .ok_or_else(|| Error::parse(origin, line, format!("expected quoted response, got `{field}`")))?;
                *map.get(inner)
                    .ok_or_else(|| Error::parse(origin, line, format!("unknown response `{inner}`")))?
            }
            None => field
                .parse::<usize>()
                .map_err(|_| Error::parse(origin, line, format!("bad action `{field}`")))?,
        };
        if a >= n_choices {
            return Err(Error::parse(origin, line, format!("action {a} out of range")));
        }
        Ok(a)
    };
    let mut transitions = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::parse(origin, line, format!("expected 8 fields, found {}", f.len())));
        }
        let num = |x: &str, what: &str| -> Result<u64> {
            x.parse::<u64>()
                .map_err(|_| Error::parse(origin, line, format!("bad {what} `{x}`")))
        };
        let state = |x: &str, what: &str| -> Result<StateId> {
            let s = num(x, what)? as usize;
            if s >= env.num_states() {
                return Err(Error::parse(origin, line, format!("{what} {s} out of range")));
            }
            Ok(s)
        };
        let r: f64 = f[4]
            .parse()
            .map_err(|_| Error::parse(origin, line, format!("bad reward `{}`", f[4])))?;
        if !r.is_finite() {
            return Err(Error::parse(origin, line, "reward must be finite"));
        }
        let done = match f[7] {
            "0" => false,
            "1" => true,
            x => return Err(Error::parse(origin, line, format!("bad done flag `{x}`"))),
        };
        let a_next = match f[6] {
            "-" => None,
            x => Some(parse_action(x, line)?),
        };
        if a_next.is_some() == done {
            return Err(Error::parse(origin, line, "a_next must be present exactly when not done"));
        }
        transitions.push(Transition {
            episode_id: num(f[0], "episode id")?,
            t: u32::try_from(num(f[1], "step")?).map_err(|_| Error::parse(origin, line, "step too large"))?,
            s: state(f[2], "state")?,
            a: parse_action(f[3], line)?,
            r,
            s_next: state(f[5], "next state")?,
            a_next,
            done,
        });
    }
    Ok(Dataset {
        granularity,
        transitions,
        env_fingerprint: fingerprint,
        behavior,
    })
}

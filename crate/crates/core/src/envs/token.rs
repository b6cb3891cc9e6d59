//! Token-sequence dialogue environment.
//!
//! A state is the last `context_window` partner utterances, each summarized by
//! its topic (or "none" before the partner has spoken), plus one absorbing
//! end-of-dialogue state. Actions are responses generated by a small grammar:
//! an optional surprise opener, a topic body, and an optional question closer,
//! plus the dull templates themselves. After each agent response a scripted
//! partner either ends the dialogue or replies on some topic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, TokenMeta};
use crate::error::{Error, Result};
use crate::mdp::{EnvParts, EnvSpec};
use crate::rewards::{dull_similarity, Lexicon, RewardComponents, RewardWeights};
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Marker {
    Surprise,
    Question,
    Dull,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabEntry {
    pub token: String,
    pub topic: usize,
    #[serde(default)]
    pub marker: Option<Marker>,
}

/// Scripted partner. Probabilities are clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartnerScript {
    /// Chance the partner replies on the agent's topic rather than a uniform topic.
    pub follow_prob: f64,
    pub base_leave: f64,
    /// Added leave probability per unit of dull similarity.
    pub dull_leave: f64,
    /// Added leave probability when the agent changes the partner's topic.
    pub offtopic_leave: f64,
}

impl Default for PartnerScript {
    fn default() -> Self {
        PartnerScript {
            follow_prob: 0.6,
            base_leave: 0.0,
            dull_leave: 0.0,
            offtopic_leave: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenEnvConfig {
    pub vocab: Vec<VocabEntry>,
    pub topic_names: Vec<String>,
    pub dull_templates: Vec<Vec<String>>,
    pub max_len: usize,
    pub num_topics: usize,
    pub context_window: usize,
    pub seed: u64,
    pub body_lengths: Vec<usize>,
    pub bodies_per_length: usize,
    /// Chance each body token is drawn from a different topic.
    pub off_topic_rate: f64,
    pub partner: PartnerScript,
    pub weights: RewardWeights,
    pub discount: f64,
    pub horizon: usize,
    pub action_cap: usize,
}

const DEFAULT_TOPICS: [(&str, [&str; 8]); 4] = [
    ("food", ["pizza", "pasta", "steak", "salad", "cook", "dinner", "spicy", "recipe"]),
    ("sports", ["football", "team", "match", "goal", "coach", "season", "run", "score"]),
    ("music", ["song", "band", "guitar", "concert", "album", "sing", "melody", "drums"]),
    ("travel", ["trip", "beach", "flight", "hotel", "city", "mountain", "map", "visit"]),
];

impl Default for TokenEnvConfig {
    fn default() -> Self {
        let mut vocab = Vec::new();
        for (t, (_, words)) in DEFAULT_TOPICS.iter().enumerate() {
            for w in words {
                vocab.push(VocabEntry {
                    token: w.to_string(),
                    topic: t,
                    marker: None,
                });
            }
        }
        let marked = [
            (&crate::rewards::DEFAULT_SURPRISE[..], Marker::Surprise),
            (&crate::rewards::DEFAULT_QUESTION[..], Marker::Question),
        ];
        for (words, marker) in marked {
            for (i, w) in words.iter().enumerate() {
                vocab.push(VocabEntry {
                    token: w.to_string(),
                    topic: i % DEFAULT_TOPICS.len(),
                    marker: Some(marker),
                });
            }
        }
        let dull = crate::rewards::default_dull_templates();
        let mut dull_tokens: Vec<&String> = dull.iter().flatten().collect();
        dull_tokens.sort();
        dull_tokens.dedup();
        for (i, w) in dull_tokens.into_iter().enumerate() {
            vocab.push(VocabEntry {
                token: w.clone(),
                topic: i % DEFAULT_TOPICS.len(),
                marker: Some(Marker::Dull),
            });
        }
        TokenEnvConfig {
            vocab,
            topic_names: DEFAULT_TOPICS.iter().map(|(n, _)| n.to_string()).collect(),
            dull_templates: dull,
            max_len: 16,
            num_topics: DEFAULT_TOPICS.len(),
            context_window: 1,
            seed: 0,
            body_lengths: vec![3, 7, 10, 13],
            bodies_per_length: 1,
            off_topic_rate: 0.2,
            partner: PartnerScript::default(),
            weights: RewardWeights::default(),
            discount: 0.5,
            horizon: 5,
            action_cap: 10_000,
        }
    }
}

/// Parses a vocab file: `token topic [SURPRISE|QUESTION|DULL]` per line.
///
/// Topics may be numeric ids or names; names get ids in order of first
/// appearance. Returns the entries and the topic names.
pub fn parse_vocab(text: &str, origin: &str) -> Result<(Vec<VocabEntry>, Vec<String>)> {
    let mut names: Vec<String> = Vec::new();
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::parse(origin, i + 1, "expected `token topic [MARKER]`"));
        }
        let topic = match fields[1].parse::<usize>() {
            Ok(t) => {
                while names.len() <= t {
                    names.push(format!("topic{}", names.len()));
                }
                t
            }
            Err(_) => match names.iter().position(|n| n == fields[1]) {
                Some(t) => t,
                None => {
                    names.push(fields[1].to_string());
                    names.len() - 1
                }
            },
        };
        let marker = match fields.get(2) {
            None => None,
            Some(&"SURPRISE") => Some(Marker::Surprise),
            Some(&"QUESTION") => Some(Marker::Question),
            Some(&"DULL") => Some(Marker::Dull),
            Some(other) => return Err(Error::parse(origin, i + 1, format!("unknown marker `{other}`"))),
        };
        entries.push(VocabEntry {
            token: fields[0].to_string(),
            topic,
            marker,
        });
    }
    Ok((entries, names))
}

pub fn load_vocab(path: &Path) -> Result<(Vec<VocabEntry>, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vocab(&text, &path.display().to_string())
}

/// Most frequent topic among the tokens, lowest topic id on ties.
/// Tokens without a topic are ignored; `None` if no token has one.
pub fn majority_topic<T: AsRef<str>>(tokens: &[T], topic_of: &HashMap<String, usize>) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in tokens {
        if let Some(&topic) = topic_of.get(t.as_ref()) {
            *counts.entry(topic).or_insert(0) += 1;
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for (topic, n) in counts {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((topic, n));
        }
    }
    best.map(|(t, _)| t)
}

impl TokenEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_topics == 0 || self.max_len == 0 || self.context_window == 0 {
            return Err(Error::Config("num_topics, max_len and context_window must be positive".into()));
        }
        if self.dull_templates.is_empty() || self.dull_templates.iter().any(|d| d.is_empty()) {
            return Err(Error::Config("dull templates must be non-empty".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &self.vocab {
            if !seen.insert(e.token.as_str()) {
                return Err(Error::Config(format!("token `{}` listed twice", e.token)));
            }
            if e.token.is_empty() || e.token.contains(|c: char| c == '"' || c.is_whitespace()) {
                return Err(Error::Config(format!("token `{}` must be non-empty without quotes or whitespace", e.token)));
            }
            if e.topic >= self.num_topics {
                return Err(Error::Config(format!("token `{}` has unknown topic {}", e.token, e.topic)));
            }
        }
        for t in 0..self.num_topics {
            if !self.vocab.iter().any(|e| e.topic == t && e.marker.is_none()) {
                return Err(Error::Config(format!("topic {t} has no ordinary tokens")));
            }
        }
        for d in self.dull_templates.iter().flatten() {
            if !seen.contains(d.as_str()) {
                return Err(Error::Config(format!("dull-template token `{d}` missing from vocab")));
            }
        }
        if self.body_lengths.is_empty() || self.body_lengths.contains(&0) || self.bodies_per_length == 0 {
            return Err(Error::Config("body lengths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.off_topic_rate) {
            return Err(Error::Config("off_topic_rate must lie in [0, 1]".into()));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) || self.horizon == 0 {
            return Err(Error::Config("discount must lie in (0, 1) and horizon be positive".into()));
        }
        self.weights.validate()?;
        let states = (self.num_topics + 1).checked_pow(self.context_window as u32);
        if states.is_none_or(|n| n > 100_000) {
            return Err(Error::Config("context space too large; shrink context_window".into()));
        }
        Ok(())
    }

    fn lexicon(&self) -> Lexicon {
        let pick = |m: Marker| {
            self.vocab
                .iter()
                .filter(|e| e.marker == Some(m))
                .map(|e| e.token.clone())
                .collect::<BTreeSet<_>>()
        };
        Lexicon {
            surprise: pick(Marker::Surprise),
            question: pick(Marker::Question),
            dull: self.dull_templates.clone(),
        }
    }

    /// Enumerates the response grammar, deduplicated, in a fixed order.
    fn responses(&self) -> Result<Vec<Vec<String>>> {
        let mut rng = rng_from(self.seed);
        let by_topic: Vec<Vec<&str>> = (0..self.num_topics)
            .map(|t| {
                self.vocab
                    .iter()
                    .filter(|e| e.topic == t && e.marker.is_none())
                    .map(|e| e.token.as_str())
                    .collect()
            })
            .collect();
        let mut bodies = Vec::new();
        for (t, own) in by_topic.iter().enumerate() {
            for &len in &self.body_lengths {
                for _ in 0..self.bodies_per_length {
                    let body: Vec<String> = (0..len)
                        .map(|_| {
                            let src = if self.num_topics > 1 && rng.random::<f64>() < self.off_topic_rate {
                                let other = (t + 1 + rng.random_range(0..self.num_topics - 1)) % self.num_topics;
                                &by_topic[other]
                            } else {
                                own
                            };
                            src[rng.random_range(0..src.len())].to_string()
                        })
                        .collect();
                    bodies.push(body);
                }
            }
        }
        let lex = self.lexicon();
        let openers: Vec<Option<&String>> =
            std::iter::once(None).chain(lex.surprise.iter().map(Some)).collect();
        let closers: Vec<Option<&String>> =
            std::iter::once(None).chain(lex.question.iter().map(Some)).collect();
        let budget = openers.len() * bodies.len() * closers.len() + self.dull_templates.len();
        if budget > self.action_cap {
            return Err(Error::Config(format!(
                "response space has {budget} actions, cap is {}; shrink the vocab, body_lengths or max_len",
                self.action_cap
            )));
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let mut push = |r: Vec<String>| {
            if r.len() <= self.max_len && seen.insert(r.join(" ")) {
                out.push(r);
            }
        };
        for d in &self.dull_templates {
            push(d.clone());
        }
        for body in &bodies {
            for o in &openers {
                for c in &closers {
                    let mut r = Vec::with_capacity(body.len() + 2);
                    r.extend(o.cloned());
                    r.extend(body.iter().cloned());
                    r.extend(c.cloned());
                    push(r);
                }
            }
        }
        Ok(out)
    }
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

pub fn make_token_env(cfg: &TokenEnvConfig) -> Result<(EnvSpec, Classifier)> {
    cfg.validate()?;
    let lexicon = cfg.lexicon();
    let responses = cfg.responses()?;
    let topic_of: HashMap<String, usize> = cfg.vocab.iter().map(|e| (e.token.clone(), e.topic)).collect();
    let assign: Vec<usize> = responses
        .iter()
        .map(|r| majority_topic(r, &topic_of).unwrap_or(0))
        .collect();
    let rewards_per_action: Vec<f64> = responses
        .iter()
        .map(|r| RewardComponents::of(r, &lexicon).total(&cfg.weights))
        .collect();
    let dull: Vec<f64> = responses.iter().map(|r| dull_similarity(r, &lexicon.dull)).collect();

    // context digits: most recent utterance first; `num_topics` means "none yet"
    let nt = cfg.num_topics;
    let radix = nt + 1;
    let contexts = radix.pow(cfg.context_window as u32);
    let end = contexts;
    let ns = contexts + 1;
    let na = responses.len();
    let decode = |mut x: usize| -> Vec<usize> {
        (0..cfg.context_window)
            .map(|_| {
                let d = x % radix;
                x /= radix;
                d
            })
            .collect()
    };
    let shift_in = |ctx: usize, topic: usize| -> usize {
        // drop the oldest digit, push `topic` as most recent
        let keep = ctx % radix.pow(cfg.context_window as u32 - 1);
        keep * radix + topic
    };

    let mut transitions = Vec::with_capacity(ns * na);
    let mut rewards = Vec::with_capacity(ns * na);
    for ctx in 0..contexts {
        let last = decode(ctx)[0];
        for a in 0..na {
            let c = assign[a];
            let off = last < nt && c != last;
            let leave = clamp01(
                cfg.partner.base_leave
                    + cfg.partner.dull_leave * dull[a]
                    + if off { cfg.partner.offtopic_leave } else { 0.0 },
            );
            let follow = clamp01(cfg.partner.follow_prob);
            let mut row: BTreeMap<usize, f64> = BTreeMap::new();
            if leave > 0.0 {
                row.insert(end, leave);
            }
            for topic in 0..nt {
                let p = (1.0 - leave) * (follow * f64::from(u8::from(topic == c)) + (1.0 - follow) / nt as f64);
                if p > 0.0 {
                    *row.entry(shift_in(ctx, topic)).or_insert(0.0) += p;
                }
            }
            let total: f64 = row.values().sum();
            transitions.push(row.into_iter().map(|(s, p)| (s, p / total)).collect());
            rewards.push(rewards_per_action[a]);
        }
    }
    for _ in 0..na {
        transitions.push(vec![(end, 1.0)]);
        rewards.push(0.0);
    }
    // all-"none" context
    let start = (0..cfg.context_window).fold(0, |acc, _| acc * radix + nt);
    let meta = TokenMeta {
        responses,
        lexicon,
        weights: cfg.weights,
        topic_names: if cfg.topic_names.len() == nt {
            cfg.topic_names.clone()
        } else {
            (0..nt).map(|t| format!("topic{t}")).collect()
        },
    };
    let env = EnvSpec::new(EnvParts {
        name: format!("token-{}", cfg.seed),
        num_states: ns,
        num_actions: na,
        num_categories: nt,
        action_category: assign.clone(),
        transitions,
        rewards,
        discount: cfg.discount,
        terminal_states: vec![end],
        initial: vec![(start, 1.0)],
        horizon: cfg.horizon,
        tokens: Some(meta),
    })?;
    Ok((env, Classifier::new(assign, nt)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::total_reward;

    #[test]
    fn default_env_builds() {
        let (env, f) = make_token_env(&TokenEnvConfig::default()).unwrap();
        assert!(env.num_actions() > 100);
        assert_eq!(f.num_categories(), 4);
        assert!(env.num_actions() <= 10_000);
    }

    #[test]
    fn single_topic_response_classifies_to_it() {
        let cfg = TokenEnvConfig::default();
        let topic_of: HashMap<String, usize> = cfg.vocab.iter().map(|e| (e.token.clone(), e.topic)).collect();
        let r: Vec<String> = ["song", "band", "guitar", "album"].iter().map(|s| s.to_string()).collect();
        assert_eq!(majority_topic(&r, &topic_of), Some(2));
        let mut four = cfg.clone();
        four.vocab.push(VocabEntry {
            token: "x3".into(),
            topic: 3,
            marker: None,
        });
        let topic_of: HashMap<String, usize> = four.vocab.iter().map(|e| (e.token.clone(), e.topic)).collect();
        assert_eq!(majority_topic(&["x3", "x3"], &topic_of), Some(3));
    }

    #[test]
    fn exhaustive_ties_go_to_lowest_topic() {
        // 2-topic vocab, all sequences of length <= 4 over {a (topic 0), b (topic 1)}
        let topic_of: HashMap<String, usize> = [("a".to_string(), 0), ("b".to_string(), 1)].into();
        for len in 1..=4u32 {
            for mask in 0..(1u32 << len) {
                let seq: Vec<&str> = (0..len).map(|i| if mask >> i & 1 == 1 { "b" } else { "a" }).collect();
                let nb = mask.count_ones();
                let na = len - nb;
                let expect = if nb > na { 1 } else { 0 };
                assert_eq!(majority_topic(&seq, &topic_of), Some(expect), "{seq:?}");
            }
        }
    }

    #[test]
    fn twelve_token_surprise_question_scores_two_and_a_half() {
        let (env, _) = make_token_env(&TokenEnvConfig::default()).unwrap();
        let tok = env.tokens().unwrap();
        let a = (0..env.num_actions())
            .find(|&a| {
                let r = tok.response(a);
                r.len() == 12 && r[0] == "Wow" && r[11] == "?"
            })
            .expect("grammar yields a 12-token Wow ... ? response");
        assert_eq!(env.reward(0, a), 2.5);
    }

    #[test]
    fn env_rewards_equal_composite() {
        let (env, _) = make_token_env(&TokenEnvConfig::default()).unwrap();
        let tok = env.tokens().unwrap();
        let mut rng = rng_from(5);
        for _ in 0..1000 {
            let s = rng.random_range(0..env.num_states() - 1);
            let a = rng.random_range(0..env.num_actions());
            let want = total_reward(tok.response(a), &tok.weights, &tok.lexicon);
            assert_eq!(env.reward(s, a), want);
        }
    }

    #[test]
    fn classifier_agrees_with_recount() {
        let cfg = TokenEnvConfig::default();
        let (env, f) = make_token_env(&cfg).unwrap();
        let topic_of: HashMap<&str, usize> = cfg.vocab.iter().map(|e| (e.token.as_str(), e.topic)).collect();
        for a in 0..env.num_actions() {
            let mut counts = vec![0usize; cfg.num_topics];
            for t in env.tokens().unwrap().response(a) {
                counts[topic_of[t.as_str()]] += 1;
            }
            let max = *counts.iter().max().unwrap();
            let want = counts.iter().position(|&n| n == max).unwrap();
            assert_eq!(f.classify(a).unwrap(), want);
        }
    }

    #[test]
    fn cap_is_enforced() {
        let cfg = TokenEnvConfig {
            action_cap: 50,
            ..Default::default()
        };
        let err = make_token_env(&cfg).unwrap_err();
        assert!(err.to_string().contains("shrink"));
    }

    #[test]
    fn vocab_file_parses() {
        let text = "# comment\npizza food\nWow food SURPRISE\n? 1 QUESTION\nokay sports DULL\n";
        let (v, names) = parse_vocab(text, "inline").unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v[1].marker, Some(Marker::Surprise));
        assert_eq!(names[0], "food");
        assert_eq!(v[2].topic, 1);
        assert!(parse_vocab("pizza food BOGUS\n", "inline").is_err());
    }
}

//! Response-level rewards: dull-template similarity, surprise, length and
//! question asking, plus their weighted total.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Surprise words from the evaluation heuristic.
pub const DEFAULT_SURPRISE: [&str; 7] = ["Aha", "Oh", "Wow", "Whoa", "Gee", "Really?", "Amazing"];

pub const DEFAULT_QUESTION: [&str; 8] = ["What", "Why", "How", "Where", "When", "Who", "Which", "?"];

pub const QUESTION_MARK: &str = "?";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub w_dull: f64,
    pub w_surprise: f64,
    pub w_length: f64,
    pub w_question: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_dull: 1.0,
            w_surprise: 1.0,
            w_length: 1.0,
            w_question: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_dull, self.w_surprise, self.w_length, self.w_question];
        if all.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("reward weights must be finite".into()));
        }
        Ok(())
    }
}

/// Token sets and dull templates the rewards are computed against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lexicon {
    pub surprise: BTreeSet<String>,
    pub question: BTreeSet<String>,
    pub dull: Vec<Vec<String>>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon {
            surprise: DEFAULT_SURPRISE.iter().map(|s| s.to_string()).collect(),
            question: DEFAULT_QUESTION.iter().map(|s| s.to_string()).collect(),
            dull: default_dull_templates(),
        }
    }
}

pub fn default_dull_templates() -> Vec<Vec<String>> {
    ["I don't know", "I am not sure", "okay", "I don't know what you mean"]
        .iter()
        .map(|t| tokenize(t))
        .collect()
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

/// Reads dull templates, one per line; blank lines and `#` comments are skipped.
pub fn load_dull_templates(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let templates: Vec<Vec<String>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(tokenize)
        .collect();
    if templates.is_empty() {
        return Err(Error::parse(path.display(), 0, "no dull templates"));
    }
    Ok(templates)
}

fn term_counts<T: AsRef<str>>(tokens: &[T]) -> BTreeMap<&str, f64> {
    let mut tf = BTreeMap::new();
    for t in tokens {
        *tf.entry(t.as_ref()).or_insert(0.0) += 1.0;
    }
    tf
}

fn cosine(a: &BTreeMap<&str, f64>, b: &BTreeMap<&str, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Max term-frequency cosine similarity to any dull template, in `[0, 1]`.
///
/// The empty response counts as maximally dull.
pub fn dull_similarity<T: AsRef<str>, U: AsRef<str>>(response: &[T], dull_list: &[Vec<U>]) -> f64 {
    if response.is_empty() {
        return 1.0;
    }
    let r = term_counts(response);
    dull_list
        .iter()
        .map(|d| cosine(&r, &term_counts(d)))
        .fold(0.0, f64::max)
}

pub fn surprise_reward<T: AsRef<str>>(response: &[T], surprise: &BTreeSet<String>) -> f64 {
    if response.iter().any(|t| surprise.contains(t.as_ref())) {
        1.0
    } else {
        0.0
    }
}

/// Step function of the token count.
pub fn length_reward(num_tokens: usize) -> f64 {
    if num_tokens < 5 {
        -0.5
    } else if num_tokens < 10 {
        0.0
    } else if num_tokens < 15 {
        0.5
    } else {
        1.0
    }
}

pub fn question_reward<T: AsRef<str>>(response: &[T], question: &BTreeSet<String>) -> f64 {
    let asks = response
        .iter()
        .any(|t| t.as_ref() == QUESTION_MARK || question.contains(t.as_ref()));
    if asks {
        1.0
    } else {
        0.0
    }
}

/// The four component scores of one response.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardComponents {
    pub dull: f64,
    pub surprise: f64,
    pub length: f64,
    pub question: f64,
}

impl RewardComponents {
    pub fn of<T: AsRef<str>>(response: &[T], lexicon: &Lexicon) -> Self {
        RewardComponents {
            dull: dull_similarity(response, &lexicon.dull),
            surprise: surprise_reward(response, &lexicon.surprise),
            length: length_reward(response.len()),
            question: question_reward(response, &lexicon.question),
        }
    }

    /// `-w_dull*dull + w_surprise*surprise + w_length*length + w_question*question`.
    pub fn total(&self, w: &RewardWeights) -> f64 {
        -w.w_dull * self.dull
            + w.w_surprise * self.surprise
            + w.w_length * self.length
            + w.w_question * self.question
    }
}

pub fn total_reward<T: AsRef<str>>(response: &[T], weights: &RewardWeights, lexicon: &Lexicon) -> f64 {
    RewardComponents::of(response, lexicon).total(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn dull_similarity_cases() {
        let dull = vec![toks("I don't know")];
        assert_eq!(dull_similarity(&toks("I don't know"), &dull), 1.0);
        assert_eq!(dull_similarity(&toks("pizza is great"), &dull), 0.0);
        let half = dull_similarity(&toks("a b"), &[toks("a c")]);
        assert!((half - 0.5).abs() < 1e-15);
        let empty: Vec<String> = vec![];
        assert_eq!(dull_similarity(&empty, &dull), 1.0);
    }

    #[test]
    fn surprise_is_exact_token_match() {
        let lex = Lexicon::default();
        assert_eq!(surprise_reward(&toks("Wow that is neat"), &lex.surprise), 1.0);
        assert_eq!(surprise_reward(&Vec::<String>::new(), &lex.surprise), 0.0);
        assert_eq!(surprise_reward(&toks("wow that is neat"), &lex.surprise), 0.0);
    }

    #[test]
    fn length_steps() {
        assert_eq!(length_reward(4), -0.5);
        assert_eq!(length_reward(10), 0.5);
        assert_eq!(length_reward(0), -0.5);
    }

    #[test]
    fn question_cases() {
        let lex = Lexicon::default();
        assert_eq!(question_reward(&toks("you like it ?"), &lex.question), 1.0);
        assert_eq!(question_reward(&toks("What do you like"), &lex.question), 1.0);
        assert_eq!(question_reward(&toks("I like it ."), &lex.question), 0.0);
    }

    #[test]
    fn total_arithmetic() {
        let w = RewardWeights::default();
        let c = RewardComponents {
            dull: 0.5,
            surprise: 1.0,
            length: 0.5,
            question: 1.0,
        };
        assert_eq!(c.total(&w), 2.0);
        assert_eq!(RewardComponents::default().total(&w), 0.0);
        let w2 = RewardWeights {
            w_dull: 2.0,
            ..w
        };
        let dull_only = RewardComponents {
            dull: 1.0,
            ..Default::default()
        };
        assert_eq!(dull_only.total(&w2), -2.0);
    }
}

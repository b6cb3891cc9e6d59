//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use dualq::mdp::{EnvParts, EnvSpec, Policy};

/// Solves `(I - gamma P_pi) V = r_pi` by Gaussian elimination with partial
/// pivoting. Terminal states are pinned to 0.
pub fn solve_values(env: &EnvSpec, pi: &Policy) -> Vec<f64> {
    let n = env.num_states();
    let g = env.discount();
    let mut m = vec![vec![0.0; n + 1]; n];
    for s in 0..n {
        m[s][s] = 1.0;
        if env.is_terminal(s) {
            continue;
        }
        for a in 0..env.num_actions() {
            let p = pi.prob(s, a);
            m[s][n] += p * env.reward(s, a);
            for &(s2, t) in env.transition(s, a) {
                if !env.is_terminal(s2) {
                    m[s][s2] -= g * p * t;
                }
            }
        }
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, piv);
        for row in 0..n {
            if row != col {
                let k = m[row][col] / m[col][col];
                if k != 0.0 {
                    for c in col..=n {
                        m[row][c] -= k * m[col][c];
                    }
                }
            }
        }
    }
    (0..n).map(|s| m[s][n] / m[s][s]).collect()
}

pub fn solve_q(env: &EnvSpec, pi: &Policy) -> Vec<Vec<f64>> {
    let v = solve_values(env, pi);
    (0..env.num_states())
        .map(|s| {
            (0..env.num_actions())
                .map(|a| {
                    if env.is_terminal(s) {
                        return 0.0;
                    }
                    env.reward(s, a)
                        + env.discount()
                            * env
                                .transition(s, a)
                                .iter()
                                .filter(|x| !env.is_terminal(x.0))
                                .map(|&(s2, t)| t * v[s2])
                                .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Enumerates every ordered L-tuple of draws; the winner is the highest-Q
/// draw, ties broken by a uniformly random position among the tied draws.
pub fn brute_induced_row(row: &[f64], q: &[f64], l: usize) -> Vec<f64> {
    let na = row.len();
    let mut out = vec![0.0; na];
    let mut idx = vec![0usize; l];
    loop {
        let p: f64 = idx.iter().map(|&a| row[a]).product();
        if p > 0.0 {
            let best = idx.iter().map(|&a| q[a]).fold(f64::NEG_INFINITY, f64::max);
            let tied: Vec<usize> = idx.iter().copied().filter(|&a| q[a] == best).collect();
            for &a in &tied {
                out[a] += p / tied.len() as f64;
            }
        }
        let mut k = 0;
        loop {
            if k == l {
                return out;
            }
            idx[k] += 1;
            if idx[k] < na {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Draw-by-draw recursion on the running winner; Q-values in the row must be distinct.
pub fn sequential_induced_row(row: &[f64], q: &[f64], l: usize) -> Vec<f64> {
    let na = row.len();
    for a in 0..na {
        for b in a + 1..na {
            assert!(q[a] != q[b], "sequential oracle needs distinct Q-values");
        }
    }
    let mut best = row.to_vec();
    for _ in 1..l {
        let prev = best.clone();
        for a in 0..na {
            let below_draw: f64 = (0..na).filter(|&b| q[b] < q[a]).map(|b| row[b]).sum();
            let below_best: f64 = (0..na).filter(|&b| q[b] < q[a]).map(|b| prev[b]).sum();
            best[a] = prev[a] * (below_draw + row[a]) + row[a] * below_best;
        }
    }
    best
}

pub fn sequential_induced(pi: &Policy, q: &[Vec<f64>], l: usize) -> Policy {
    let probs: Vec<f64> = (0..pi.num_states())
        .flat_map(|s| sequential_induced_row(pi.row(s), &q[s], l))
        .collect();
    Policy::new(pi.num_states(), pi.num_choices(), probs).unwrap()
}

pub fn brute_induced(pi: &Policy, q: &[Vec<f64>], l: usize) -> Policy {
    let probs: Vec<f64> = (0..pi.num_states())
        .flat_map(|s| brute_induced_row(pi.row(s), &q[s], l))
        .collect();
    Policy::new(pi.num_states(), pi.num_choices(), probs).unwrap()
}

/// Five states (state 4 terminal), eight actions in two categories.
pub fn five_by_eight() -> EnvSpec {
    let (ns, na) = (5, 8);
    let mut transitions = Vec::new();
    let mut rewards = Vec::new();
    for s in 0..ns {
        for a in 0..na {
            if s == 4 {
                transitions.push(vec![(4, 1.0)]);
                rewards.push(0.0);
                continue;
            }
            let n1 = (s + a + 1) % 4;
            let n2 = (s * 3 + a) % 5;
            if n1 == n2 {
                transitions.push(vec![(n1, 1.0)]);
            } else {
                transitions.push(vec![(n1, 0.75), (n2, 0.25)]);
            }
            rewards.push(((s * 7 + a * 3) % 11) as f64 / 4.0 - 1.0);
        }
    }
    EnvSpec::new(EnvParts {
        name: "five-by-eight".into(),
        num_states: ns,
        num_actions: na,
        num_categories: 2,
        action_category: (0..na).map(|a| a / 4).collect(),
        transitions,
        rewards,
        discount: 0.5,
        terminal_states: vec![4],
        initial: vec![(0, 1.0)],
        horizon: 60,
        tokens: None,
    })
    .unwrap()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

//! Small-sample statistics for the seed-level comparisons.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// One-sided paired sign-flip permutation test of `mean(a - b) > 0`.
///
/// Returns `(1 + #{permuted mean >= observed}) / (1 + permutations)`.
pub fn paired_permutation_test(a: &[f64], b: &[f64], permutations: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument("paired samples must have equal, non-zero length".into()));
    }
    if permutations == 0 {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed: f64 = d.iter().sum();
    let mut rng = rng_from(seed);
    let mut at_least = 0usize;
    for _ in 0..permutations {
        let s: f64 = d
            .iter()
            .map(|&x| if rng.random::<bool>() { x } else { -x })
            .sum();
        // relative slack keeps exact ties (e.g. all-zero differences) counted
        if s >= observed - 1e-12 * observed.abs().max(1.0) {
            at_least += 1;
        }
    }
    Ok((1 + at_least) as f64 / (1 + permutations) as f64)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal series of length >= 2".into()));
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}

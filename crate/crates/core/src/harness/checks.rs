//! Seeded verification suites shared by the `verify` subcommand and the
//! acceptance tests.

use std::path::Path;

use crate::envs::{random_env, random_policy, CategoricalEnvConfig, Classifier, RandomEnvConfig};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::fmt_sig6;
use crate::harness::pipeline::{prepare, Prepared, RunOptions};
use crate::data::{coarsen_dataset, exhaustive_dataset, quantize_env, quantize_policy};
use crate::improve::ControlGenerator;
use crate::mdp::{argmax_lowest, exact_action_values, lump_by_category, EnvSpec, Policy};
use crate::par;
use crate::qlearn::{fit_coarse_q, fit_fine_q, FitConfig};
use crate::verify::{
    conditioning_fidelity, hypothesis_gap, oracle_q_error, theorem1_curve, theorem2_check, DualSampler,
    FidelityEstimate, HypothesisGap, QError, Theorem2Report, TheoremReport,
};

pub const THEOREM_LS: [usize; 5] = [1, 2, 4, 8, 16];
pub const EXACT_TOL: f64 = 1e-12;

/// Member `seed` of the random env family used by the exact suites:
/// 4..=20 states, at most 50 actions, discount 0.5, a terminal state on odd seeds.
pub fn suite_env(seed: u64) -> Result<(EnvSpec, Policy)> {
    let cfg = RandomEnvConfig {
        num_states: 4 + (seed as usize * 7) % 16,
        num_categories: 2 + (seed as usize) % 4,
        actions_per_category: 2 + (seed as usize * 3) % 9,
        branching: 3,
        discount: 0.5,
        terminal_prob: if seed % 2 == 1 { 0.1 } else { 0.0 },
        horizon: 20,
        seed,
    };
    let env = random_env(&cfg)?;
    let pi = random_policy(env.num_states(), env.num_actions(), 2.0, seed.wrapping_add(1_000));
    Ok((env, pi))
}

pub fn theorem1_suite(seeds: &[u64], ls: &[usize]) -> Result<Vec<(u64, TheoremReport)>> {
    par::try_map_range(seeds.len(), |i| {
        let (env, pi) = suite_env(seeds[i])?;
        Ok((seeds[i], theorem1_curve(&env, &pi, ls, EXACT_TOL)?))
    })
}

/// Moves a `shift` share of every row toward (`toward_best`) or away from
/// the Q-argmax, on the given states only.
pub fn shift_mass(pi: &Policy, q: &crate::mdp::ActionValueTable, states: &[usize], shift: f64, toward_best: bool) -> Result<Policy> {
    let na = pi.num_choices();
    let mut probs = pi.as_slice().to_vec();
    for &s in states {
        let row = q.row(s);
        let target = if toward_best {
            argmax_lowest(row)
        } else {
            let neg: Vec<f64> = row.iter().map(|x| -x).collect();
            argmax_lowest(&neg)
        };
        let dst = &mut probs[s * na..(s + 1) * na];
        dst.iter_mut().for_each(|p| *p *= 1.0 - shift);
        dst[target] += shift;
    }
    Policy::new(pi.num_states(), na, probs)
}

/// Per env: a premise-satisfying pair (pi_beta = pi, pi_alpha = pi shifted
/// toward the Q-argmax everywhere) and a premise-violating pair (pi_alpha
/// shifted toward the Q-argmin at one state).
pub fn theorem2_suite(seeds: &[u64], l: usize) -> Result<Vec<(u64, Theorem2Report, Theorem2Report)>> {
    par::try_map_range(seeds.len(), |i| {
        let (env, pi) = suite_env(seeds[i])?;
        let q = exact_action_values(&env, &pi, EXACT_TOL)?;
        let live: Vec<usize> = env.non_terminal_states().collect();
        let better = shift_mass(&pi, &q, &live, 0.5, true)?;
        let worse = shift_mass(&pi, &q, &live[..1], 0.5, false)?;
        Ok((
            seeds[i],
            theorem2_check(&env, &better, &pi, &pi, l, EXACT_TOL)?,
            theorem2_check(&env, &worse, &pi, &pi, l, EXACT_TOL)?,
        ))
    })
}

/// Full-batch tabular settings under which the fitted critic reaches the
/// fixed point of the exhaustive dataset. Patience exceeds the sync interval
/// because the loss is flat between target syncs.
pub fn oracle_fit_config(discount: f64, seed: u64) -> FitConfig {
    FitConfig {
        learning_rate: 0.5,
        discount,
        batch_size: 1 << 30,
        convergence_delta: 1e-12,
        convergence_patience: 100,
        max_epochs: 5_000,
        seed,
        ..FitConfig::default()
    }
}

/// Fits fine and coarse tabular critics on the exhaustive dataset of a
/// quantized random env and compares them with `Q^pi` and the lumped `Q^pi`.
pub fn critic_oracle_errors(env_cfg: &RandomEnvConfig, resolution: u32) -> Result<(QError, QError)> {
    let env = quantize_env(&random_env(env_cfg)?, resolution)?;
    let raw = random_policy(env.num_states(), env.num_actions(), 1.0, env_cfg.seed.wrapping_add(7));
    let pi = quantize_policy(&raw, resolution)?;
    let data = exhaustive_dataset(&env, &pi, resolution)?;
    let coarse = coarsen_dataset(&data, &Classifier::from_env(&env))?;
    let cfg = oracle_fit_config(env.discount(), env_cfg.seed);
    let (fine, coarse_q) = par::join(|| fit_fine_q(&data, &env, &cfg), || fit_coarse_q(&coarse, &env, &cfg));
    let exact = exact_action_values(&env, &pi, EXACT_TOL)?;
    let (lumped, pc) = lump_by_category(&env, &pi)?;
    let exact_c = exact_action_values(&lumped, &pc, EXACT_TOL)?;
    Ok((oracle_q_error(&fine?, &exact)?, oracle_q_error(&coarse_q?, &exact_c)?))
}

/// The two oracle envs: a small dense one and a 20-state one with a terminal.
pub fn critic_oracle_envs() -> [RandomEnvConfig; 2] {
    [
        RandomEnvConfig {
            num_states: 6,
            num_categories: 2,
            actions_per_category: 4,
            branching: 3,
            seed: 31,
            ..RandomEnvConfig::default()
        },
        RandomEnvConfig {
            num_states: 19,
            num_categories: 2,
            actions_per_category: 2,
            branching: 2,
            terminal_prob: 0.125,
            seed: 32,
            ..RandomEnvConfig::default()
        },
    ]
}

/// Uniform in-category generator on a `states x categories x per_category` block layout.
pub fn block_generator(states: usize, categories: usize, per_category: usize) -> Result<(ControlGenerator, Classifier)> {
    let f = Classifier::new((0..categories * per_category).map(|a| a / per_category).collect(), categories)?;
    Ok((ControlGenerator::uniform(&f, states), f))
}

/// Ratio of a fidelity-0 (unconditioned uniform) source and of a generator
/// fitted on the default categorical env's data at `fidelity`.
pub fn fidelity_suite(fidelity: f64, n_per_pair: usize, seed: u64) -> Result<(FidelityEstimate, FidelityEstimate)> {
    let cat = CategoricalEnvConfig::default();
    let (uniform, f) = block_generator(cat.num_states, cat.num_categories, cat.actions_per_category)?;
    let states: Vec<usize> = (0..cat.num_states).collect();
    let cats: Vec<usize> = (0..cat.num_categories).collect();
    let baseline = conditioning_fidelity(&uniform.with_fidelity(0.0)?, &f, &states, &cats, n_per_pair, seed)?;
    let cfg = ExperimentConfig {
        env: crate::harness::config::EnvConfig::Categorical(cat),
        improve: crate::harness::config::ImproveSection {
            generator_fidelity: fidelity,
            ..Default::default()
        },
        ..ExperimentConfig::from_toml("out_dir = \"unused\"\n")?
    };
    let p = prepare(&cfg, seed)?;
    let fitted = conditioning_fidelity(&p.generator, &p.classifier, &states, &cats, n_per_pair, seed.wrapping_add(1))?;
    Ok((baseline, fitted))
}

/// Relative gap of mean fitted Q between dual-pipeline proposals and the
/// standard method's candidate source (the MLE agent), over every live state.
pub fn gap_for(p: &Prepared, n: usize, seed: u64) -> Result<HypothesisGap> {
    let states: Vec<usize> = p.env.non_terminal_states().collect();
    let dual = DualSampler {
        q_coarse: &p.q_coarse,
        gen: &p.generator,
    };
    hypothesis_gap(&p.q_fine, &dual, &p.mle, &states, n, seed)
}

fn write(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the exact theorem suites, the fidelity check and the hypothesis gap
/// (on the configured env, first seed) and writes one CSV per check.
pub fn run_verification(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<String>> {
    let out = opts.out_dir(cfg).join("verify");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let seeds: Vec<u64> = (0..20).map(|s| s + opts.seed_offset).collect();
    let mut summary = Vec::new();

    let t1 = theorem1_suite(&seeds, &THEOREM_LS)?;
    let mut csv = String::from("seed,num_states,num_actions,max_violation,floor_violation,monotone\n");
    for (seed, r) in &t1 {
        let (env, _) = suite_env(*seed)?;
        csv.push_str(&format!(
            "{seed},{},{},{},{},{}\n",
            env.num_states(),
            env.num_actions(),
            fmt_sig6(r.max_violation),
            fmt_sig6(r.floor_violation),
            r.monotone
        ));
    }
    write(&out.join("theorem1.csv"), csv)?;
    let mono = t1.iter().filter(|x| x.1.monotone).count();
    summary.push(format!("theorem1: {mono}/{} envs monotone in L", t1.len()));

    let t2 = theorem2_suite(&seeds, 4)?;
    let mut csv = String::from("seed,construction,premise_holds,variance_gap,max_violation,conclusion\n");
    for (seed, good, bad) in &t2 {
        for (name, r) in [("toward_best", good), ("toward_worst", bad)] {
            let conclusion = match r.conclusion_holds {
                Some(true) => "holds",
                Some(false) => "fails",
                None => "premise_violated",
            };
            csv.push_str(&format!(
                "{seed},{name},{},{},{},{conclusion}\n",
                r.premise_holds(),
                fmt_sig6(r.variance_gap),
                fmt_sig6(r.max_violation)
            ));
        }
    }
    write(&out.join("theorem2.csv"), csv)?;
    let held = t2.iter().filter(|x| x.1.conclusion_holds == Some(true)).count();
    summary.push(format!("theorem2: conclusion holds on {held}/{} premise-satisfying pairs", t2.len()));

    let (base, fitted) = fidelity_suite(cfg.improve.generator_fidelity.min(0.8), 100, opts.seed_offset)?;
    write(
        &out.join("fidelity.csv"),
        format!(
            "source,ratio,se,draws\nuniform,{},{},{}\ngenerator,{},{},{}\n",
            fmt_sig6(base.ratio),
            fmt_sig6(base.se),
            base.draws,
            fmt_sig6(fitted.ratio),
            fmt_sig6(fitted.se),
            fitted.draws
        ),
    )?;
    summary.push(format!("fidelity: uniform {:.4}, generator {:.4}", base.ratio, fitted.ratio));

    let seed = opts.seeds(cfg)[0];
    let p = prepare(cfg, seed)?;
    let g = gap_for(&p, 1000, seed)?;
    write(
        &out.join("hypothesis_gap.csv"),
        format!(
            "seed,e_dual,e_standard,gap,gap_se\n{seed},{},{},{},{}\n",
            fmt_sig6(g.e_a),
            fmt_sig6(g.e_b),
            fmt_sig6(g.gap),
            fmt_sig6(g.gap_se)
        ),
    )?;
    summary.push(format!("hypothesis gap: {:.4} (se {:.4})", g.gap, g.gap_se));
    Ok(summary)
}

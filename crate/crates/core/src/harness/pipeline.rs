//! End-to-end runs: env, data, critics, improvement, evaluation.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::data::{coarsen_dataset, collect_dataset, load_dataset, make_behavior_policy, save_dataset, Dataset};
use crate::envs::{make_categorical_env, make_token_env, Classifier};
use crate::error::{Error, Result};
use crate::harness::config::{EnvConfig, EvalMode, ExperimentConfig};
use crate::harness::manifest::write_manifest;
use crate::harness::metrics::{emit_metrics, fmt_sig6, Method, MetricsRow};
use crate::harness::stats::{mean, paired_permutation_test, spearman, std_dev};
use crate::improve::{
    clone_policy, fit_control_generator, improve_policy, policy_from_text, policy_to_text, ControlGenerator,
    ImprovementConfig, Mode,
};
use crate::mdp::{EnvSpec, Policy};
use crate::par;
use crate::qlearn::{fit_coarse_q, fit_fine_q, FitConfig, QFunction};
use crate::rewards::RewardComponents;
use crate::rng::{derive_seed, sample_index, sample_sparse, sub_rng};

/// Permutations used by every seed-level significance test.
pub const PERMUTATIONS: usize = 10_000;

const STREAM_COLLECT: u64 = 1;
const STREAM_FIT_FINE: u64 = 2;
const STREAM_FIT_COARSE: u64 = 3;
const STREAM_IMPROVE_STANDARD: u64 = 4;
const STREAM_IMPROVE_DUAL: u64 = 5;
const STREAM_EVAL: u64 = 6;
const STREAM_HELDOUT: u64 = 7;
const STREAM_TEST: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenEnv,
    Collect,
    Fit,
    Improve,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::GenEnv, Stage::Collect, Stage::Fit, Stage::Improve, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenEnv => "gen-env",
            Stage::Collect => "collect",
            Stage::Fit => "fit",
            Stage::Improve => "improve",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn in_stage<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.name().to_string(),
            source: Box::new(other),
        },
    })
}

/// Overrides applied on top of a config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed_offset: u64,
    pub out_dir: Option<PathBuf>,
}

impl RunOptions {
    pub fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| cfg.out_dir.clone())
    }

    pub fn seeds(&self, cfg: &ExperimentConfig) -> Vec<u64> {
        cfg.eval.seeds.iter().map(|s| s.wrapping_add(self.seed_offset)).collect()
    }
}

/// Builds the configured env for one replicate; the env seed is offset by `seed`.
pub fn build_env(cfg: &EnvConfig, seed: u64) -> Result<(EnvSpec, Classifier)> {
    match cfg {
        EnvConfig::Categorical(c) => {
            let mut c = c.clone();
            c.seed = c.seed.wrapping_add(seed);
            make_categorical_env(&c)
        }
        EnvConfig::Token(t) => {
            let mut t = t.clone();
            t.seed = t.seed.wrapping_add(seed);
            make_token_env(&t)
        }
    }
}

fn fit_cfg(base: &FitConfig, seed: u64, stream: u64) -> FitConfig {
    FitConfig {
        seed: derive_seed(derive_seed(seed, stream), base.seed),
        ..base.clone()
    }
}

/// Everything the improvement step needs for one replicate.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub env: EnvSpec,
    pub classifier: Classifier,
    pub behavior: Policy,
    pub data: Dataset,
    pub coarse: Dataset,
    pub q_fine: QFunction,
    pub q_coarse: QFunction,
    pub generator: ControlGenerator,
    pub mle: Policy,
}

pub fn collect_stage(cfg: &ExperimentConfig, env: &EnvSpec, seed: u64) -> Result<(Policy, Dataset)> {
    let behavior = make_behavior_policy(env, cfg.data.behavior_quality, cfg.data.epsilon)?;
    let horizon = cfg.data.horizon.unwrap_or(env.horizon());
    let data = collect_dataset(env, &behavior, cfg.data.episodes, horizon, derive_seed(seed, STREAM_COLLECT))?;
    Ok((behavior, data))
}

pub fn fit_stage(cfg: &ExperimentConfig, env: &EnvSpec, data: &Dataset, coarse: &Dataset, seed: u64) -> Result<(QFunction, QFunction)> {
    let fine_cfg = fit_cfg(&cfg.fit.fine, seed, STREAM_FIT_FINE);
    let coarse_cfg = fit_cfg(&cfg.fit.coarse, seed, STREAM_FIT_COARSE);
    let (qf, qc) = par::join(
        || fit_fine_q(data, env, &fine_cfg),
        || fit_coarse_q(coarse, env, &coarse_cfg),
    );
    let (qf, qc) = (qf?, qc?);
    if !qf.converged {
        log::warn!("seed {seed}: fine critic hit max_epochs without converging");
    }
    if !qc.converged {
        log::warn!("seed {seed}: coarse critic hit max_epochs without converging");
    }
    Ok((qf, qc))
}

pub fn generator_for(cfg: &ExperimentConfig, env: &EnvSpec, f: &Classifier, data: &Dataset) -> Result<ControlGenerator> {
    fit_control_generator(
        data,
        f,
        env.num_states(),
        cfg.improve.generator_temperature,
        cfg.improve.generator_smoothing,
    )?
    .with_fidelity(cfg.improve.generator_fidelity)
}

pub fn mle_policy(cfg: &ExperimentConfig, env: &EnvSpec, data: &Dataset) -> Result<Policy> {
    clone_policy(
        &data.state_actions(),
        env.num_states(),
        env.num_actions(),
        cfg.improve.cloning_smoothing,
    )
}

/// Runs gen-env, collect and fit for one replicate in memory.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let (env, classifier) = in_stage(Stage::GenEnv, build_env(&cfg.env, seed))?;
    let (behavior, data, coarse) = in_stage(Stage::Collect, {
        collect_stage(cfg, &env, seed).and_then(|(b, d)| {
            let c = coarsen_dataset(&d, &classifier)?;
            Ok((b, d, c))
        })
    })?;
    let (q_fine, q_coarse) = in_stage(Stage::Fit, fit_stage(cfg, &env, &data, &coarse, seed))?;
    let (generator, mle) = in_stage(Stage::Improve, {
        generator_for(cfg, &env, &classifier, &data).and_then(|g| Ok((g, mle_policy(cfg, &env, &data)?)))
    })?;
    Ok(Prepared {
        seed,
        env,
        classifier,
        behavior,
        data,
        coarse,
        q_fine,
        q_coarse,
        generator,
        mle,
    })
}

fn improve_cfg(cfg: &ExperimentConfig, mode: Mode, n: usize, seed: u64) -> ImprovementConfig {
    let stream = match mode {
        Mode::Standard => STREAM_IMPROVE_STANDARD,
        Mode::Dual => STREAM_IMPROVE_DUAL,
    };
    ImprovementConfig {
        num_candidates: n,
        mode,
        cloning_smoothing: cfg.improve.cloning_smoothing,
        passes: cfg.improve.passes,
        seed: derive_seed(seed, stream),
    }
}

/// The standard (candidates from the MLE agent) and dual agents at `n` candidates.
pub fn improve_agents(cfg: &ExperimentConfig, p: &Prepared, n: usize) -> Result<(Policy, Policy)> {
    in_stage(Stage::Improve, (|| {
        let standard = improve_policy(
            &p.env,
            &p.data,
            &p.q_fine,
            None,
            None,
            &p.mle,
            &improve_cfg(cfg, Mode::Standard, n, p.seed),
        )?;
        let dual = improve_policy(
            &p.env,
            &p.data,
            &p.q_fine,
            Some(&p.q_coarse),
            Some(&p.generator),
            &p.mle,
            &improve_cfg(cfg, Mode::Dual, n, p.seed),
        )?;
        if dual.unvisited_queries > 0 || standard.unvisited_queries > 0 {
            log::debug!(
                "seed {}: {} / {} candidate evaluations hit untrained entries",
                p.seed,
                standard.unvisited_queries,
                dual.unvisited_queries
            );
        }
        Ok((standard.policy, dual.policy))
    })())
}

/// Where an agent is evaluated.
#[derive(Clone, Copy, Debug)]
pub enum EvalTarget<'a> {
    /// Roll dialogues against the env's own dynamics (the scripted partner on token envs).
    Simulator,
    /// Greedy responses at the states of a held-out dataset.
    Dataset(&'a Dataset),
}

/// Aggregate scores of one agent. Token metrics are per-response means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub cs: Option<f64>,
    pub se: Option<f64>,
    pub rl: Option<f64>,
    pub aq: Option<f64>,
    /// Simulator: mean discounted return per dialogue. Dataset: mean
    /// one-step reward of the greedy response.
    pub avg_return: f64,
    /// Standard error of `avg_return` across dialogues or states.
    pub return_se: f64,
    pub responses: usize,
    pub dialogues: usize,
}

#[derive(Default)]
struct Tally {
    cs: f64,
    se: f64,
    rl: f64,
    aq: f64,
    n: usize,
}

impl Tally {
    fn add(&mut self, env: &EnvSpec, a: usize) {
        if let Some(tok) = env.tokens() {
            let resp = tok.response(a);
            let c = RewardComponents::of(resp, &tok.lexicon);
            self.cs += c.dull;
            self.se += c.surprise;
            self.rl += resp.len() as f64;
            self.aq += c.question;
        }
        self.n += 1;
    }

    fn merge(&mut self, o: &Tally) {
        self.cs += o.cs;
        self.se += o.se;
        self.rl += o.rl;
        self.aq += o.aq;
        self.n += o.n;
    }
}

/// Scores `agent` on `env`. Each dialogue draws from its own stream
/// `(seed, dialogue)`, so agents evaluated with the same seed share starts
/// and partner randomness as far as their trajectories agree.
pub fn evaluate_agent(
    agent: &Policy,
    env: &EnvSpec,
    target: EvalTarget<'_>,
    num_dialogues: usize,
    turns: usize,
    seed: u64,
) -> Result<Evaluation> {
    agent.check_shape(env.num_states(), env.num_actions())?;
    if turns == 0 || num_dialogues == 0 {
        return Err(Error::InvalidArgument("turns and num_dialogues must be >= 1".into()));
    }
    let (returns, tallies): (Vec<f64>, Vec<Tally>) = match target {
        EvalTarget::Simulator => par::map_range(num_dialogues, |i| {
            let mut rng = sub_rng(seed, i as u64);
            let mut tally = Tally::default();
            let mut s = sample_sparse(env.initial(), &mut rng);
            let mut ret = 0.0;
            let mut disc = 1.0;
            for _ in 0..turns {
                if env.is_terminal(s) {
                    break;
                }
                let a = sample_index(agent.row(s), &mut rng);
                tally.add(env, a);
                ret += disc * env.reward(s, a);
                disc *= env.discount();
                s = sample_sparse(env.transition(s, a), &mut rng);
            }
            (ret, tally)
        })
        .into_iter()
        .unzip(),
        EvalTarget::Dataset(d) => {
            let states: Vec<usize> = d
                .transitions
                .iter()
                .map(|t| t.s)
                .filter(|&s| s < env.num_states() && !env.is_terminal(s))
                .collect();
            if states.is_empty() {
                return Err(Error::InvalidArgument("held-out dataset has no usable states".into()));
            }
            states
                .iter()
                .map(|&s| {
                    let a = agent.greedy(s);
                    let mut tally = Tally::default();
                    tally.add(env, a);
                    (env.reward(s, a), tally)
                })
                .unzip()
        }
    };
    let mut total = Tally::default();
    tallies.iter().for_each(|t| total.merge(t));
    let per = |x: f64| (env.tokens().is_some() && total.n > 0).then(|| x / total.n as f64);
    Ok(Evaluation {
        cs: per(total.cs),
        se: per(total.se),
        rl: per(total.rl),
        aq: per(total.aq),
        avg_return: mean(&returns),
        return_se: std_dev(&returns) / (returns.len() as f64).sqrt(),
        responses: total.n,
        dialogues: returns.len(),
    })
}

fn row(method: Method, seed: u64, l: usize, e: &Evaluation) -> MetricsRow {
    MetricsRow {
        method,
        seed,
        l,
        cs: e.cs,
        se: e.se,
        rl: e.rl,
        aq: e.aq,
        avg_return: e.avg_return,
    }
}

fn heldout(cfg: &ExperimentConfig, p: &Prepared) -> Result<Option<Dataset>> {
    match cfg.eval.mode {
        EvalMode::Simulator => Ok(None),
        EvalMode::Dataset => {
            let horizon = cfg.data.horizon.unwrap_or(p.env.horizon());
            let episodes = cfg.eval.num_dialogues;
            collect_dataset(&p.env, &p.behavior, episodes, horizon, derive_seed(p.seed, STREAM_HELDOUT)).map(Some)
        }
    }
}

fn evaluate_with(cfg: &ExperimentConfig, env: &EnvSpec, agent: &Policy, held: Option<&Dataset>, seed: u64) -> Result<Evaluation> {
    let target = held.map_or(EvalTarget::Simulator, EvalTarget::Dataset);
    evaluate_agent(agent, env, target, cfg.eval.num_dialogues, cfg.eval.turns, derive_seed(seed, STREAM_EVAL))
}

/// Rows and agents of one replicate.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub rows: Vec<MetricsRow>,
    /// `(L, standard agent, dual agent)` per candidate count.
    pub agents: Vec<(usize, Policy, Policy)>,
}

/// MLE row (L = 0) plus standard and dual rows for every `l` in `ls`.
pub fn run_seed(cfg: &ExperimentConfig, p: &Prepared, ls: &[usize]) -> Result<SeedRun> {
    let held = in_stage(Stage::Evaluate, heldout(cfg, p))?;
    let mut rows = vec![row(
        Method::Mle,
        p.seed,
        0,
        &in_stage(Stage::Evaluate, evaluate_with(cfg, &p.env, &p.mle, held.as_ref(), p.seed))?,
    )];
    let mut agents = Vec::with_capacity(ls.len());
    for &l in ls {
        let (standard, dual) = improve_agents(cfg, p, l)?;
        for (method, agent) in [(Method::Standard, &standard), (Method::Dual, &dual)] {
            let e = in_stage(Stage::Evaluate, evaluate_with(cfg, &p.env, agent, held.as_ref(), p.seed))?;
            rows.push(row(method, p.seed, l, &e));
        }
        agents.push((l, standard, dual));
    }
    Ok(SeedRun { rows, agents })
}

/// Output of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    /// `(relative path, sha256)` of every artifact.
    pub manifest: Vec<(String, String)>,
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes into `<out>.partial`, then swaps it into place; on failure the
/// partial directory is removed and the previous output is left alone.
fn staged<T>(out: &Path, body: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let mut partial = out.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    if partial.exists() {
        std::fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    std::fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    match body(&partial) {
        Ok(v) => {
            if out.exists() {
                std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
            }
            std::fs::rename(&partial, out).map_err(|e| Error::io(out, e))?;
            Ok(v)
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&partial);
            Err(e)
        }
    }
}

fn write_prepared(dir: &Path, p: &Prepared) -> Result<()> {
    write(&dir.join("env.json"), &p.env.to_json())?;
    write(&dir.join("behavior.tsv"), &policy_to_text(&p.behavior))?;
    write(&dir.join("dataset.tsv"), &crate::data::dataset_to_string(&p.data, &p.env))?;
    write(&dir.join("dataset_coarse.tsv"), &crate::data::dataset_to_string(&p.coarse, &p.env))?;
    write(&dir.join("q_fine.tsv"), &p.q_fine.to_text())?;
    write(&dir.join("q_coarse.tsv"), &p.q_coarse.to_text())?;
    write(&dir.join("policy_mle.tsv"), &policy_to_text(&p.mle))
}

/// Full pipeline for every configured seed: MLE, standard and dual agents at
/// the configured candidate count, `metrics.csv`, per-seed artifacts and a
/// hash manifest. Reruns with the same config produce identical bytes.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let out = opts.out_dir(cfg);
    let seeds = opts.seeds(cfg);
    let n = cfg.improve.num_candidates;
    staged(&out, |tmp| {
        write(&tmp.join("config.toml"), &cfg.to_toml())?;
        let per_seed = par::try_map_range(seeds.len(), |i| -> Result<Vec<MetricsRow>> {
            let seed = seeds[i];
            log::info!("seed {seed}: preparing");
            let p = prepare(cfg, seed)?;
            let dir = seed_dir(tmp, seed);
            write_prepared(&dir, &p)?;
            let run = run_seed(cfg, &p, &[n])?;
            let (_, standard, dual) = &run.agents[0];
            write(&dir.join("policy_standard.tsv"), &policy_to_text(standard))?;
            write(&dir.join("policy_dual.tsv"), &policy_to_text(dual))?;
            Ok(run.rows)
        })?;
        let rows: Vec<MetricsRow> = per_seed.into_iter().flatten().collect();
        emit_metrics(&rows, &tmp.join("metrics.csv"))?;
        let manifest = write_manifest(tmp)?;
        let mut rows = rows;
        crate::harness::metrics::sort_rows(&mut rows);
        Ok(RunSummary {
            out_dir: out.clone(),
            rows,
            manifest,
        })
    })
}

/// Runs one stage for every seed, reading earlier stages' artifacts from
/// the output directory and writing this stage's.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage, opts: &RunOptions) -> Result<Vec<(String, String)>> {
    cfg.validate()?;
    let out = opts.out_dir(cfg);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let seeds = opts.seeds(cfg);
    let rows = par::try_map_range(seeds.len(), |i| in_stage(stage, stage_for_seed(cfg, stage, seeds[i], &out)))?;
    if stage == Stage::Evaluate {
        let rows: Vec<MetricsRow> = rows.into_iter().flatten().collect();
        emit_metrics(&rows, &out.join("metrics.csv"))?;
    }
    write_manifest(&out)
}

fn load_env(dir: &Path) -> Result<EnvSpec> {
    let path = dir.join("env.json");
    if !path.exists() {
        return Err(Error::Config(format!("{} is missing; run gen-env first", path.display())));
    }
    EnvSpec::from_json(&read(&path)?)
}

fn load_policy(path: &Path) -> Result<Policy> {
    policy_from_text(&read(path)?, &path.display().to_string())
}

fn stage_for_seed(cfg: &ExperimentConfig, stage: Stage, seed: u64, out: &Path) -> Result<Vec<MetricsRow>> {
    let dir = seed_dir(out, seed);
    match stage {
        Stage::GenEnv => {
            let (env, _) = build_env(&cfg.env, seed)?;
            write(&dir.join("env.json"), &env.to_json())?;
        }
        Stage::Collect => {
            let env = load_env(&dir)?;
            let (behavior, data) = collect_stage(cfg, &env, seed)?;
            let coarse = coarsen_dataset(&data, &Classifier::from_env(&env))?;
            write(&dir.join("behavior.tsv"), &policy_to_text(&behavior))?;
            save_dataset(&data, &env, &dir.join("dataset.tsv"))?;
            save_dataset(&coarse, &env, &dir.join("dataset_coarse.tsv"))?;
        }
        Stage::Fit => {
            let env = load_env(&dir)?;
            let data = load_dataset(&dir.join("dataset.tsv"), &env)?;
            let coarse = load_dataset(&dir.join("dataset_coarse.tsv"), &env)?;
            let (qf, qc) = fit_stage(cfg, &env, &data, &coarse, seed)?;
            qf.save(&dir.join("q_fine.tsv"))?;
            qc.save(&dir.join("q_coarse.tsv"))?;
        }
        Stage::Improve => {
            let env = load_env(&dir)?;
            let classifier = Classifier::from_env(&env);
            let data = load_dataset(&dir.join("dataset.tsv"), &env)?;
            let coarse = load_dataset(&dir.join("dataset_coarse.tsv"), &env)?;
            let p = Prepared {
                seed,
                behavior: load_policy(&dir.join("behavior.tsv"))?,
                q_fine: QFunction::load(&dir.join("q_fine.tsv"))?,
                q_coarse: QFunction::load(&dir.join("q_coarse.tsv"))?,
                generator: generator_for(cfg, &env, &classifier, &data)?,
                mle: mle_policy(cfg, &env, &data)?,
                env,
                classifier,
                data,
                coarse,
            };
            let (standard, dual) = improve_agents(cfg, &p, cfg.improve.num_candidates)?;
            write(&dir.join("policy_mle.tsv"), &policy_to_text(&p.mle))?;
            write(&dir.join("policy_standard.tsv"), &policy_to_text(&standard))?;
            write(&dir.join("policy_dual.tsv"), &policy_to_text(&dual))?;
        }
        Stage::Evaluate => {
            let env = load_env(&dir)?;
            let held = match cfg.eval.mode {
                EvalMode::Simulator => None,
                EvalMode::Dataset => {
                    let behavior = load_policy(&dir.join("behavior.tsv"))?;
                    let horizon = cfg.data.horizon.unwrap_or(env.horizon());
                    Some(collect_dataset(&env, &behavior, cfg.eval.num_dialogues, horizon, derive_seed(seed, STREAM_HELDOUT))?)
                }
            };
            let mut rows = Vec::new();
            for method in Method::ALL {
                let agent = load_policy(&dir.join(format!("policy_{}.tsv", method.as_str())))?;
                let e = evaluate_with(cfg, &env, &agent, held.as_ref(), seed)?;
                let l = if method == Method::Mle { 0 } else { cfg.improve.num_candidates };
                rows.push(row(method, seed, l, &e));
            }
            return Ok(rows);
        }
    }
    Ok(Vec::new())
}

/// One `(method, L, metric)` cell of the sampling-size curve.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    pub l: usize,
    pub metric: &'static str,
    /// `None` when the metric does not apply to the env.
    pub mean: Option<f64>,
    pub half_sd: Option<f64>,
    pub n_seeds: usize,
}

pub const SWEEP_METRICS: [&str; 5] = ["CS", "SE", "RL", "AQ", "avg_return"];

fn metric_of(r: &MetricsRow, name: &str) -> Option<f64> {
    match name {
        "CS" => r.cs,
        "SE" => r.se,
        "RL" => r.rl,
        "AQ" => r.aq,
        _ => Some(r.avg_return),
    }
}

/// Per-seed rows of a sweep plus its mean / half-SD summary.
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub ls: Vec<usize>,
    pub runs: Vec<MetricsRow>,
    pub summary: Vec<SweepRow>,
}

/// Per-seed returns for `method` at `l` (the MLE anchor for `l == 0`), in seed order.
pub fn returns_at(runs: &[MetricsRow], method: Method, l: usize) -> Vec<f64> {
    let method = if l == 0 { Method::Mle } else { method };
    let mut xs: Vec<(u64, f64)> = runs
        .iter()
        .filter(|r| r.method == method && r.l == l)
        .map(|r| (r.seed, r.avg_return))
        .collect();
    xs.sort_by_key(|x| x.0);
    xs.into_iter().map(|x| x.1).collect()
}

pub fn summarize_sweep(runs: &[MetricsRow], ls: &[usize]) -> Vec<SweepRow> {
    let mut out = Vec::new();
    for method in [Method::Standard, Method::Dual] {
        for l in std::iter::once(0).chain(ls.iter().copied()) {
            let src = if l == 0 { Method::Mle } else { method };
            let cell: Vec<&MetricsRow> = runs.iter().filter(|r| r.method == src && r.l == l).collect();
            for metric in SWEEP_METRICS {
                let xs: Option<Vec<f64>> = cell.iter().map(|r| metric_of(r, metric)).collect();
                let xs = xs.filter(|v| !v.is_empty());
                out.push(SweepRow {
                    method,
                    l,
                    metric,
                    mean: xs.as_ref().map(|v| mean(v)),
                    half_sd: xs.as_ref().map(|v| 0.5 * std_dev(v)),
                    n_seeds: cell.len(),
                });
            }
        }
    }
    out
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("method,L,metric,mean,half_sd,n_seeds\n");
    let f = |x: Option<f64>| x.map_or("NA".to_string(), fmt_sig6);
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method.as_str(),
            r.l,
            r.metric,
            f(r.mean),
            f(r.half_sd),
            r.n_seeds
        ));
    }
    s
}

/// Runs standard and dual at every `l` for every seed (critics fitted once
/// per seed), writes `sweep.csv`, `sweep_runs.csv` and a manifest.
pub fn sweep_sampling_size(cfg: &ExperimentConfig, ls: &[usize], opts: &RunOptions) -> Result<SweepOutcome> {
    cfg.validate()?;
    if ls.is_empty() || ls.contains(&0) {
        return Err(Error::InvalidArgument("sweep needs positive candidate counts".into()));
    }
    let seeds = opts.seeds(cfg);
    if seeds.len() < 2 {
        return Err(Error::Config("a sweep needs at least two seeds for dispersion".into()));
    }
    let out = opts.out_dir(cfg);
    staged(&out, |tmp| {
        write(&tmp.join("config.toml"), &cfg.to_toml())?;
        let per_seed = par::try_map_range(seeds.len(), |i| -> Result<Vec<MetricsRow>> {
            let p = prepare(cfg, seeds[i])?;
            log::info!("seed {}: sweeping {} candidate counts", seeds[i], ls.len());
            run_seed(cfg, &p, ls).map(|r| r.rows)
        })?;
        let mut runs: Vec<MetricsRow> = per_seed.into_iter().flatten().collect();
        crate::harness::metrics::sort_rows(&mut runs);
        let summary = summarize_sweep(&runs, ls);
        emit_metrics(&runs, &tmp.join("sweep_runs.csv"))?;
        write(&tmp.join("sweep.csv"), &sweep_to_csv(&summary))?;
        write_manifest(tmp)?;
        Ok(SweepOutcome {
            ls: ls.to_vec(),
            runs,
            summary,
        })
    })
}

/// The seed-level comparisons drawn from a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepStats {
    /// Spearman correlation of L against mean return over the swept L
    /// values (anchor excluded), per method.
    pub spearman_standard: f64,
    pub spearman_dual: f64,
    /// Same, with the L = 0 MLE anchor included.
    pub spearman_standard_anchored: f64,
    pub spearman_dual_anchored: f64,
    /// One-sided paired p-values per swept L.
    pub p_dual_over_standard: Vec<(usize, f64)>,
    pub p_standard_over_mle: Vec<(usize, f64)>,
    pub p_dual_over_mle: Vec<(usize, f64)>,
}

pub fn sweep_stats(outcome: &SweepOutcome, seed: u64) -> Result<SweepStats> {
    let runs = &outcome.runs;
    let mle = returns_at(runs, Method::Mle, 0);
    let curve = |m: Method, with_anchor: bool| -> Result<f64> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        if with_anchor {
            xs.push(0.0);
            ys.push(mean(&mle));
        }
        for &l in &outcome.ls {
            xs.push(l as f64);
            ys.push(mean(&returns_at(runs, m, l)));
        }
        spearman(&xs, &ys)
    };
    let mut p_ds = Vec::new();
    let mut p_sm = Vec::new();
    let mut p_dm = Vec::new();
    for (k, &l) in outcome.ls.iter().enumerate() {
        let st = returns_at(runs, Method::Standard, l);
        let du = returns_at(runs, Method::Dual, l);
        let s = derive_seed(seed, STREAM_TEST + k as u64);
        p_ds.push((l, paired_permutation_test(&du, &st, PERMUTATIONS, derive_seed(s, 0))?));
        p_sm.push((l, paired_permutation_test(&st, &mle, PERMUTATIONS, derive_seed(s, 1))?));
        p_dm.push((l, paired_permutation_test(&du, &mle, PERMUTATIONS, derive_seed(s, 2))?));
    }
    Ok(SweepStats {
        spearman_standard: if outcome.ls.len() >= 2 { curve(Method::Standard, false)? } else { 0.0 },
        spearman_dual: if outcome.ls.len() >= 2 { curve(Method::Dual, false)? } else { 0.0 },
        spearman_standard_anchored: curve(Method::Standard, true)?,
        spearman_dual_anchored: curve(Method::Dual, true)?,
        p_dual_over_standard: p_ds,
        p_standard_over_mle: p_sm,
        p_dual_over_mle: p_dm,
    })
}

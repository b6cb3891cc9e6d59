use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dualq::harness::checks::run_verification;
use dualq::harness::pipeline::sweep_stats;
use dualq::harness::{run_experiment, run_stage, sweep_sampling_size, ExperimentConfig, RunOptions, Stage};

/// Offline dual-granularity Q-learning experiments.
#[derive(Parser, Debug)]
#[command(name = "dualq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Added to every configured seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build and write the environment for each seed.
    GenEnv(Common),
    /// Collect the offline dataset with the behavior policy.
    Collect(Common),
    /// Fit the fine and coarse critics.
    Fit(Common),
    /// Improve the policy (standard and dual) and clone the MLE baseline.
    Improve(Common),
    /// Evaluate the three agents and write metrics.csv.
    Evaluate(Common),
    /// Sampling-size sweep over candidate counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated candidate counts; defaults to the config's sweep.ls.
        #[arg(long, value_delimiter = ',')]
        ls: Option<Vec<usize>>,
    },
    /// Exact theorem suites, conditioning fidelity and hypothesis gap.
    Verify(Common),
    /// Whole pipeline in one process, or every stage up to `--stage` from disk.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: Option<String>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, RunOptions)> {
    let cfg = ExperimentConfig::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
    let opts = RunOptions {
        seed_offset: common.seed_offset,
        out_dir: common.out.clone(),
    };
    Ok((cfg, opts))
}

fn stage(common: &Common, st: Stage) -> Result<()> {
    let (cfg, opts) = load(common)?;
    let manifest = run_stage(&cfg, st, &opts)?;
    println!("{st}: {} artifacts under {}", manifest.len(), opts.out_dir(&cfg).display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenEnv(c) => stage(&c, Stage::GenEnv)?,
        Command::Collect(c) => stage(&c, Stage::Collect)?,
        Command::Fit(c) => stage(&c, Stage::Fit)?,
        Command::Improve(c) => stage(&c, Stage::Improve)?,
        Command::Evaluate(c) => stage(&c, Stage::Evaluate)?,
        Command::Sweep { common, ls } => {
            let (cfg, opts) = load(&common)?;
            let ls = ls.unwrap_or_else(|| cfg.sweep.ls.clone());
            let outcome = sweep_sampling_size(&cfg, &ls, &opts)?;
            let stats = sweep_stats(&outcome, common.seed_offset)?;
            println!("wrote {}", opts.out_dir(&cfg).join("sweep.csv").display());
            println!(
                "spearman(L, return): standard {:.3}, dual {:.3}",
                stats.spearman_standard, stats.spearman_dual
            );
            for (k, (l, p)) in stats.p_dual_over_standard.iter().enumerate() {
                println!(
                    "L={l}: p(dual>standard)={p:.4} p(standard>mle)={:.4} p(dual>mle)={:.4}",
                    stats.p_standard_over_mle[k].1, stats.p_dual_over_mle[k].1
                );
            }
        }
        Command::Verify(c) => {
            let (cfg, opts) = load(&c)?;
            for line in run_verification(&cfg, &opts)? {
                println!("{line}");
            }
        }
        Command::Run { common, stage: None } => {
            let (cfg, opts) = load(&common)?;
            let summary = run_experiment(&cfg, &opts)?;
            println!(
                "{} metric rows, {} artifacts under {}",
                summary.rows.len(),
                summary.manifest.len(),
                summary.out_dir.display()
            );
        }
        Command::Run {
            common,
            stage: Some(name),
        } => {
            let last = Stage::parse(&name)?;
            let (cfg, opts) = load(&common)?;
            for st in Stage::ALL.into_iter().take_while(|s| *s <= last) {
                run_stage(&cfg, st, &opts)?;
                println!("{st}: done");
            }
        }
    }
    Ok(())
}

mod common;

use std::path::Path;

use common::five_by_eight;
use dualq::envs::{make_token_env, TokenEnvConfig, TokenMeta};
use dualq::harness::config::EnvConfig;
use dualq::harness::metrics::{emit_metrics, metrics_to_csv, read_metrics, Method, MetricsRow};
use dualq::harness::pipeline::{evaluate_agent, prepare, summarize_sweep, EvalTarget, SWEEP_METRICS};
use dualq::harness::{run_experiment, run_stage, ExperimentConfig, RunOptions, Stage};
use dualq::mdp::{exact_policy_evaluation, EnvParts, EnvSpec, Policy};
use dualq::rewards::{tokenize, Lexicon, RewardWeights};
use dualq::Error;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn golden_rows() -> Vec<MetricsRow> {
    vec![
        MetricsRow {
            method: Method::Dual,
            seed: 1,
            l: 8,
            cs: Some(0.125),
            se: Some(0.5),
            rl: Some(12.3456789),
            aq: Some(1.0),
            avg_return: 2.5,
        },
        MetricsRow {
            method: Method::Mle,
            seed: 0,
            l: 0,
            cs: None,
            se: None,
            rl: None,
            aq: None,
            avg_return: 1234567.0,
        },
        MetricsRow {
            method: Method::Standard,
            seed: 0,
            l: 4,
            cs: Some(0.0),
            se: Some(1.0 / 3.0),
            rl: Some(7.0),
            aq: Some(0.0001234567),
            avg_return: -0.00001,
        },
    ]
}

#[test]
fn metrics_match_golden_file() {
    let want = std::fs::read_to_string(fixture("metrics_golden.csv")).unwrap();
    assert_eq!(metrics_to_csv(&golden_rows()).unwrap(), want);
    let mut reversed = golden_rows();
    reversed.reverse();
    assert_eq!(metrics_to_csv(&reversed).unwrap(), want);
}

#[test]
fn metrics_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let row = MetricsRow {
        method: Method::Standard,
        seed: 7,
        l: 12,
        cs: Some(0.25),
        se: None,
        rl: Some(9.5),
        aq: Some(0.75),
        avg_return: -1.5,
    };
    emit_metrics(std::slice::from_ref(&row), &path).unwrap();
    assert_eq!(read_metrics(&path).unwrap(), vec![row]);
    assert!(emit_metrics(&[], &path).is_err());
    let err = emit_metrics(&golden_rows(), &dir.path().join("missing/m.csv")).unwrap_err();
    assert!(err.to_string().contains("missing/m.csv"), "{err}");
}

/// One live state and an absorbing end; the single action is a fixed response.
fn one_response_env(response: &str) -> EnvSpec {
    EnvSpec::new(EnvParts {
        name: "one-response".into(),
        num_states: 2,
        num_actions: 1,
        num_categories: 1,
        action_category: vec![0],
        transitions: vec![vec![(0, 1.0)], vec![(1, 1.0)]],
        rewards: vec![1.0, 0.0],
        discount: 0.5,
        terminal_states: vec![1],
        initial: vec![(0, 1.0)],
        horizon: 5,
        tokens: Some(TokenMeta {
            responses: vec![tokenize(response)],
            lexicon: Lexicon::default(),
            weights: RewardWeights::default(),
            topic_names: vec!["any".into()],
        }),
    })
    .unwrap()
}

#[test]
fn surprised_fifteen_token_question_scores() {
    let text = "Wow is that a pizza recipe they cooked for the dinner party last night ?";
    assert_eq!(tokenize(text).len(), 15);
    let env = one_response_env(text);
    let e = evaluate_agent(&Policy::uniform(2, 1), &env, EvalTarget::Simulator, 10, 3, 0).unwrap();
    assert_eq!((e.cs, e.se, e.rl, e.aq), (Some(0.0), Some(1.0), Some(15.0), Some(1.0)));
    assert_eq!(e.responses, 30);
}

#[test]
fn token_simulator_runs_full_dialogues() {
    let (env, _) = make_token_env(&TokenEnvConfig::default()).unwrap();
    let agent = Policy::uniform(env.num_states(), env.num_actions());
    let e = evaluate_agent(&agent, &env, EvalTarget::Simulator, 1000, 5, 3).unwrap();
    assert_eq!(e.dialogues, 1000);
    assert_eq!(e.responses, 5000);
    let cs = e.cs.unwrap();
    assert!((0.0..=1.0).contains(&cs));
}

#[test]
fn categorical_env_reports_not_applicable_token_metrics() {
    let env = five_by_eight();
    let e = evaluate_agent(&Policy::uniform(5, 8), &env, EvalTarget::Simulator, 20, 5, 0).unwrap();
    assert_eq!((e.cs, e.se, e.rl, e.aq), (None, None, None, None));
    assert!(e.avg_return.is_finite());
}

#[test]
fn simulated_return_matches_exact_value() {
    let env = five_by_eight();
    let agent = dualq::envs::random_policy(5, 8, 1.5, 21);
    let exact = exact_policy_evaluation(&env, &agent, 1e-13).unwrap().get(0);
    let e = evaluate_agent(&agent, &env, EvalTarget::Simulator, 20_000, 60, 4).unwrap();
    assert!((e.avg_return - exact).abs() <= 3.0 * e.return_se, "{} vs {exact} (se {})", e.avg_return, e.return_se);
}

#[test]
fn dataset_mode_scores_greedy_one_step_rewards() {
    let env = five_by_eight();
    let behavior = Policy::uniform(5, 8);
    let held = dualq::data::collect_dataset(&env, &behavior, 50, 4, 9).unwrap();
    let choice = [3, 1, 4, 1, 0];
    let agent = Policy::deterministic(8, &choice).unwrap();
    let e = evaluate_agent(&agent, &env, EvalTarget::Dataset(&held), 1, 1, 0).unwrap();
    let rewards: Vec<f64> = held.transitions.iter().map(|t| env.reward(t.s, choice[t.s])).collect();
    assert_eq!(e.dialogues, rewards.len());
    assert!((e.avg_return - rewards.iter().sum::<f64>() / rewards.len() as f64).abs() < 1e-12);
}

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(&format!(
        r#"
out_dir = "{}"

[env]
kind = "categorical"
num_states = 6
num_categories = 3
actions_per_category = 3

[data]
episodes = 150
horizon = 6

[improve]
num_candidates = 4

[eval]
num_dialogues = 60
turns = 4
seeds = [0, 1]

[sweep]
ls = [2, 4]
"#,
        out.display()
    ))
    .unwrap();
    cfg.fit.fine.max_epochs = 40;
    cfg.fit.coarse.max_epochs = 40;
    cfg
}

#[test]
fn staged_run_matches_one_shot_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir.path().join("once"));
    let once = run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(once.rows.len(), 6);
    let staged = RunOptions {
        seed_offset: 0,
        out_dir: Some(dir.path().join("staged")),
    };
    for st in Stage::ALL {
        run_stage(&cfg, st, &staged).unwrap();
    }
    let a = std::fs::read(dir.path().join("once/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("staged/metrics.csv")).unwrap();
    assert_eq!(a, b);
    for name in ["q_fine.tsv", "policy_dual.tsv", "dataset.tsv"] {
        let a = std::fs::read(dir.path().join("once/seed-0").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("staged/seed-0").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn mle_agent_is_the_dataset_clone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let p = prepare(&cfg, 0).unwrap();
    let clone = dualq::improve::clone_policy(&p.data.state_actions(), p.env.num_states(), p.env.num_actions(), 0.0).unwrap();
    assert_eq!(p.mle, clone);
}

#[test]
fn seed_offset_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = prepare(&cfg, 0).unwrap();
    let b = prepare(&cfg, 100).unwrap();
    assert_ne!(a.data.transitions, b.data.transitions);
}

#[test]
fn failing_stage_is_named_and_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = small_config(&out);
    cfg.fit.fine.backing = dualq::qlearn::Backing::Linear;
    cfg.fit.fine.learning_rate = 1e200;
    let err = run_experiment(&cfg, &RunOptions::default()).unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert_eq!(stage, "fit"),
        other => panic!("expected a stage error, got {other}"),
    }
    assert!(!out.exists());
    assert!(!dir.path().join("run.partial").exists());
}

#[test]
fn stage_without_inputs_points_at_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir.path().join("x"));
    let err = run_stage(&cfg, Stage::Fit, &RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("gen-env") || err.to_string().contains("fit"), "{err}");
}

#[test]
fn sweep_summary_has_anchor_rows_for_both_methods() {
    let runs: Vec<MetricsRow> = [0u64, 1]
        .iter()
        .flat_map(|&seed| {
            let mut rows = vec![MetricsRow {
                method: Method::Mle,
                seed,
                l: 0,
                cs: None,
                se: None,
                rl: None,
                aq: None,
                avg_return: 1.0 + seed as f64,
            }];
            for l in [4, 8, 12] {
                for m in [Method::Standard, Method::Dual] {
                    rows.push(MetricsRow {
                        method: m,
                        l,
                        avg_return: l as f64 + seed as f64,
                        ..rows[0].clone()
                    });
                }
            }
            rows
        })
        .collect();
    let summary = summarize_sweep(&runs, &[4, 8, 12]);
    assert_eq!(summary.len(), (3 + 1) * 2 * SWEEP_METRICS.len());
    let anchor = summary
        .iter()
        .find(|r| r.method == Method::Dual && r.l == 0 && r.metric == "avg_return")
        .unwrap();
    assert_eq!(anchor.mean, Some(1.5));
    // half of the sample standard deviation of {1, 2}
    assert!((anchor.half_sd.unwrap() - 0.5 * std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    assert_eq!(summary.iter().find(|r| r.metric == "CS").unwrap().mean, None);
}

#[test]
fn unknown_config_keys_are_rejected() {
    for bad in [
        "out_dir = \"x\"\nbogus = 1\n",
        "out_dir = \"x\"\n[env]\nkind = \"categorical\"\nnum_state = 3\n",
        "out_dir = \"x\"\n[fit.fine]\nlr = 0.1\n",
        "out_dir = \"x\"\n[env]\nkind = \"maze\"\n",
    ] {
        assert!(ExperimentConfig::from_toml(bad).is_err(), "{bad}");
    }
    let ok = ExperimentConfig::from_toml("out_dir = \"x\"\n").unwrap();
    assert!(matches!(ok.env, EnvConfig::Categorical(_)));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 1);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| prepare(&cfg, 3)).unwrap();
    let b = four.install(|| prepare(&cfg, 3)).unwrap();
    assert_eq!(a.data.transitions, b.data.transitions);
    assert_eq!(a.q_fine.to_text(), b.q_fine.to_text());
    assert_eq!(a.q_coarse.to_text(), b.q_coarse.to_text());
    let ea = one.install(|| evaluate_agent(&a.mle, &a.env, EvalTarget::Simulator, 300, 4, 1)).unwrap();
    let eb = four.install(|| evaluate_agent(&b.mle, &b.env, EvalTarget::Simulator, 300, 4, 1)).unwrap();
    assert_eq!(ea, eb);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
[env]
kind = "categorical"
num_states = 6
num_categories = 3
actions_per_category = 3

[data]
episodes = 150
horizon = 6

[fit.fine]
max_epochs = 40

[fit.coarse]
max_epochs = 40

[improve]
num_candidates = 4

[eval]
num_dialogues = 60
turns = 4
seeds = [0, 1]

[sweep]
ls = [2, 4]
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    let out = dir.join("out");
    std::fs::write(&path, format!("out_dir = \"{}\"\n{body}", out.display())).unwrap();
    path
}

fn dualq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualq")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn stages_one_at_a_time_match_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let cfg = cfg.to_str().unwrap();
    let staged = dir.path().join("staged");
    for cmd in ["gen-env", "collect", "fit", "improve", "evaluate"] {
        let stdout = ok(&dualq(&[cmd, "--config", cfg, "--out", staged.to_str().unwrap()]));
        assert!(stdout.contains("artifacts"), "{stdout}");
    }
    let stdout = ok(&dualq(&["run", "--config", cfg]));
    assert!(stdout.contains("6 metric rows"), "{stdout}");
    let a = std::fs::read(staged.join("metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("method,seed,L,CS,SE,RL,AQ,avg_return\n"));
}

#[test]
fn run_up_to_a_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let stdout = ok(&dualq(&["run", "--config", cfg.to_str().unwrap(), "--stage", "collect"]));
    assert_eq!(stdout, "gen-env: done\ncollect: done\n");
    assert!(dir.path().join("out/seed-0/dataset.tsv").exists());
    assert!(!dir.path().join("out/seed-0/q_fine.tsv").exists());
    let bad = dualq(&["run", "--config", cfg.to_str().unwrap(), "--stage", "deploy"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown stage"));
}

#[test]
fn seed_offset_moves_the_seed_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    ok(&dualq(&["gen-env", "--config", cfg.to_str().unwrap(), "--seed-offset", "10"]));
    assert!(dir.path().join("out/seed-10/env.json").exists());
    assert!(dir.path().join("out/seed-11/env.json").exists());
    assert!(!dir.path().join("out/seed-0").exists());
}

#[test]
fn bad_configs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[env]\nkind = \"categorical\"\nnum_state = 4\n");
    let out = dualq(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("num_state"), "{err}");

    let missing = dualq(&["run", "--config", dir.path().join("nope.toml").to_str().unwrap()]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.toml"));

    let cfg = write_config(dir.path(), CONFIG);
    let early = dualq(&["fit", "--config", cfg.to_str().unwrap()]);
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("gen-env"));
}

#[test]
fn sweep_reports_rank_correlations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let stdout = ok(&dualq(&["sweep", "--config", cfg.to_str().unwrap(), "--ls", "1,3"]));
    assert!(stdout.contains("spearman(L, return)"), "{stdout}");
    assert!(stdout.contains("L=1:") && stdout.contains("L=3:"), "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    // header + (2 Ls + anchor) x 2 methods x 5 metrics
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 5);
}

#[test]
fn verify_writes_its_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let stdout = ok(&dualq(&["verify", "--config", cfg.to_str().unwrap()]));
    assert!(!stdout.is_empty());
    for name in ["theorem1.csv", "theorem2.csv", "fidelity.csv", "hypothesis_gap.csv"] {
        assert!(dir.path().join("out/verify").join(name).exists(), "{name}");
    }
}

//! Hot loops on a one-thread pool versus the default pool.
//!
//! Build with `--no-default-features` to time the sequential fallback; both
//! pools then run the same plain iterator code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dualq::data::{collect_dataset, Dataset};
use dualq::envs::{random_env, random_policy, RandomEnvConfig};
use dualq::harness::pipeline::{evaluate_agent, EvalTarget};
use dualq::improve::{improve_policy, ImprovementConfig, Mode};
use dualq::mdp::{EnvSpec, Policy};
use dualq::qlearn::{fit_fine_q, FitConfig, QFunction};

struct Fixture {
    env: EnvSpec,
    pi: Policy,
    data: Dataset,
    q: QFunction,
}

fn fixture() -> Fixture {
    let env = random_env(&RandomEnvConfig {
        num_states: 40,
        num_categories: 5,
        actions_per_category: 8,
        horizon: 20,
        seed: 3,
        ..RandomEnvConfig::default()
    })
    .unwrap();
    let pi = random_policy(env.num_states(), env.num_actions(), 1.0, 4);
    let data = collect_dataset(&env, &pi, 500, 20, 5).unwrap();
    let q = fit_fine_q(&data, &env, &FitConfig { max_epochs: 5, ..FitConfig::default() }).unwrap();
    Fixture { env, pi, data, q }
}

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = rayon::ThreadPoolBuilder::new().build().unwrap();
    let label = if dualq::par::is_parallel() {
        format!("default-{}", default.current_num_threads())
    } else {
        "sequential".to_string()
    };
    vec![
        ("pool-1".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        (label, default),
    ]
}

fn bench(c: &mut Criterion) {
    let fx = fixture();
    let improve_cfg = ImprovementConfig {
        num_candidates: 8,
        mode: Mode::Standard,
        ..ImprovementConfig::default()
    };
    let fit_cfg = FitConfig {
        max_epochs: 5,
        ..FitConfig::default()
    };
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("collect", &name), |b| {
            b.iter(|| pool.install(|| collect_dataset(&fx.env, &fx.pi, 2000, 20, 9).unwrap()))
        });
        group.bench_function(BenchmarkId::new("fit", &name), |b| {
            b.iter(|| pool.install(|| fit_fine_q(&fx.data, &fx.env, &fit_cfg).unwrap()))
        });
        group.bench_function(BenchmarkId::new("improve", &name), |b| {
            b.iter(|| {
                pool.install(|| improve_policy(&fx.env, &fx.data, &fx.q, None, None, &fx.pi, &improve_cfg).unwrap())
            })
        });
        group.bench_function(BenchmarkId::new("evaluate", &name), |b| {
            b.iter(|| pool.install(|| evaluate_agent(&fx.pi, &fx.env, EvalTarget::Simulator, 2000, 10, 1).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);

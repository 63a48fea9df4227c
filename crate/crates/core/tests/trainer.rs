use std::path::Path;

use hetsync::config::RunConfig;
use hetsync::model::ParamVector;
use hetsync::sim::Trace;
use hetsync::trainer::{
    derive_seed, max_pairwise_distance, replay, replay_ops, run_simulated, run_threaded, AlgorithmKind, ReplayOp,
    RunStatus, ThreadOptions, TrainError, TrainSetup,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(algorithm: AlgorithmKind, nodes: usize, per_node: usize, extra: &str) -> RunConfig {
    let schedule = if algorithm == AlgorithmKind::PreduceStatic {
        format!("[schedule]\nkind = \"generalized\"\nnodes = {nodes}\nper_node = {per_node}\n")
    } else {
        String::new()
    };
    let text = format!(
        r#"
seed = 11
algorithm = "{algorithm}"
group_size = {k}
{extra}

[topology]
nodes = {nodes}
per_node = {per_node}

[model]
kind = "quadratic"
input_dim = 5
init_scale = 1.0

[data]
source = "synthetic-quadratic"
samples = 64
noise = 0.5

[optimizer]
learning_rate = 0.1
batch_size = 4

[termination]
max_iterations = 60

{schedule}
"#,
        k = 2.min(nodes * per_node),
    );
    RunConfig::from_toml_str(&text, Path::new(".")).unwrap()
}

fn setup(algorithm: AlgorithmKind, nodes: usize, per_node: usize) -> TrainSetup {
    config(algorithm, nodes, per_node, "").build().unwrap()
}

/// Quadratic gradient `x − mean(centers of batch)` written out directly.
fn quadratic_gradient(setup: &TrainSetup, x: &[f64], batch: &[usize]) -> Vec<f64> {
    let data = setup.model.train_set();
    let mut g = x.to_vec();
    for &i in batch {
        let (a, _) = data.sample(i);
        for (gj, aj) in g.iter_mut().zip(a) {
            *gj -= aj / batch.len() as f64;
        }
    }
    g
}

fn draw_batch(rng: &mut ChaCha8Rng, len: usize, bs: usize) -> Vec<usize> {
    (0..bs).map(|_| rng.random_range(0..len)).collect()
}

#[test]
fn single_worker_matches_plain_sgd() {
    for alg in AlgorithmKind::ALL {
        if alg == AlgorithmKind::PreduceStatic {
            continue;
        }
        let s = setup(alg, 1, 1);
        let out = run_simulated(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, 1000));
        let mut x = s.init.clone().into_inner();
        for _ in 0..s.termination.max_iterations {
            let b = draw_batch(&mut rng, s.model.train_set().len(), s.optimizer.batch_size);
            let g = quadratic_gradient(&s, &x, &b);
            for (xj, gj) in x.iter_mut().zip(&g) {
                *xj -= s.optimizer.learning_rate * gj;
            }
        }
        let got = out.params[0].clone().into_inner();
        let err = got.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{alg}: {err}");
        assert!(
            out.replay.ops.iter().all(|op| matches!(op, ReplayOp::Step { .. })),
            "{alg}"
        );
    }
}

#[test]
fn allreduce_tracks_mean_gradient_sgd() {
    let s = setup(AlgorithmKind::AllreduceGlobal, 2, 2);
    let out = run_simulated(&s).unwrap();
    assert_eq!(out.status, RunStatus::Completed);
    for p in &out.params[1..] {
        assert!(*p == out.params[0], "workers diverged");
    }
    let n = s.workers();
    let mut rngs: Vec<_> = (0..n)
        .map(|w| ChaCha8Rng::seed_from_u64(derive_seed(s.seed, 1000 + w as u64)))
        .collect();
    let mut x = s.init.clone().into_inner();
    for _ in 0..s.termination.max_iterations {
        let mut mean = vec![0.0; x.len()];
        for rng in rngs.iter_mut() {
            let b = draw_batch(rng, s.model.train_set().len(), s.optimizer.batch_size);
            for (m, g) in mean.iter_mut().zip(quadratic_gradient(&s, &x, &b)) {
                *m += g / n as f64;
            }
        }
        for (xj, gj) in x.iter_mut().zip(&mean) {
            *xj -= s.optimizer.learning_rate * gj;
        }
    }
    let err = out.params[0].max_abs_diff(&ParamVector::new(x));
    assert!(err < 1e-12, "{err}");
}

#[test]
fn allreduce_stays_identical_after_every_sync() {
    let s = setup(AlgorithmKind::AllreduceGlobal, 2, 4);
    let out = run_simulated(&s).unwrap();
    let ops = &out.replay.ops[..out.replay.cooldown_start];
    let mut syncs = 0;
    for (i, op) in ops.iter().enumerate() {
        if matches!(op, ReplayOp::Average { .. }) {
            let x = replay_ops(&s.model, s.workers(), &s.init, &ops[..=i]).unwrap();
            assert!(x.windows(2).all(|w| w[0] == w[1]), "diverged after sync {syncs}");
            syncs += 1;
        }
    }
    assert_eq!(syncs as u64, s.termination.max_iterations);
    assert!(out.params.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn simulated_runs_replay_exactly() {
    let cases = [
        (AlgorithmKind::PreduceRandom, 2, 4),
        (AlgorithmKind::PreduceSmart, 2, 4),
        (AlgorithmKind::PreduceStatic, 2, 2),
        (AlgorithmKind::AdpsgdPairwise, 2, 4),
        (AlgorithmKind::AllreduceGlobal, 2, 4),
        (AlgorithmKind::CentralizedPs, 2, 4),
    ];
    for (alg, nodes, per_node) in cases {
        for extra in ["", "section_length = 3", "straggler"] {
            if alg == AlgorithmKind::CentralizedPs && extra.starts_with("section") {
                continue;
            }
            let s = if extra == "straggler" {
                let mut s = setup(alg, nodes, per_node);
                let n = s.workers();
                s.profile.slowdown = vec![1.0; n];
                s.profile.slowdown[n - 1] = 4.0;

                s
            } else {
                config(alg, nodes, per_node, extra).build().unwrap()
            };
            let out = run_simulated(&s).unwrap();
            assert_eq!(out.status, RunStatus::Completed, "{alg}");
            let averages = out.replay.ops[..out.replay.cooldown_start]
                .iter()
                .filter(|op| matches!(op, ReplayOp::Average { .. }))
                .count();
            assert!(averages >= 10, "{alg} {extra}: only {averages} averages");
            let replayed = replay(&s.model, &out.replay).unwrap();
            for (a, b) in replayed.iter().zip(&out.final_params) {
                assert!(a.max_abs_diff(b) < 1e-9, "{alg} {extra}");
            }
            let pre = replay_ops(
                &s.model,
                s.workers(),
                &s.init,
                &out.replay.ops[..out.replay.cooldown_start],
            )
            .unwrap();
            for (a, b) in pre.iter().zip(&out.params) {
                assert!(a.max_abs_diff(b) < 1e-9, "{alg} {extra}");
            }
        }
    }
}

#[test]
fn simulated_runs_are_deterministic() {
    for alg in [
        AlgorithmKind::PreduceRandom,
        AlgorithmKind::PreduceSmart,
        AlgorithmKind::AdpsgdPairwise,
    ] {
        let s = setup(alg, 2, 4);
        let a = run_simulated(&s).unwrap();
        let b = run_simulated(&s).unwrap();
        assert_eq!(
            Trace::from_events(a.trace.clone()).to_jsonl(),
            Trace::from_events(b.trace).to_jsonl()
        );
        assert_eq!(a.trajectory, b.trajectory);
        let mut other = s.clone();
        other.seed += 1;
        let c = run_simulated(&other).unwrap();
        assert_ne!(a.trace, c.trace, "{alg}: seed has no effect");
    }
}

#[test]
fn cooldown_brings_workers_together() {
    let s = config(AlgorithmKind::PreduceRandom, 2, 4, "cooldown_rounds = 30")
        .build()
        .unwrap();
    let out = run_simulated(&s).unwrap();
    assert!(out.max_pairwise_distance() < 1e-3 * (1.0 + max_pairwise_distance(&out.params)));
}

#[test]
fn threshold_stops_the_run() {
    let mut s = setup(AlgorithmKind::PreduceRandom, 2, 4);
    s.termination.max_iterations = 10_000;
    let opt = s.model.quadratic_optimum().unwrap();
    let floor = hetsync::model::evaluate_loss(&s.model, &opt, &s.eval_set).unwrap();
    s.termination.loss_threshold = Some(floor + 0.05);
    let out = run_simulated(&s).unwrap();
    assert_eq!(out.status, RunStatus::ThresholdReached);
    let hit = out.threshold.unwrap();
    assert!(hit.loss <= floor + 0.05);
    assert!(out.iterations.iter().all(|&k| k < 10_000));
}

#[test]
fn time_cap_stops_the_run() {
    let mut s = setup(AlgorithmKind::AllreduceGlobal, 2, 2);
    s.termination.time_cap = Some(5.5);
    let out = run_simulated(&s).unwrap();
    assert_eq!(out.status, RunStatus::TimeCap);
    assert!(out.end_time <= 5.5);
    assert!(out.iterations.iter().all(|&k| k <= 6));
}

#[test]
fn threaded_runs_replay_exactly() {
    let cases = [
        (AlgorithmKind::PreduceRandom, 2, 4),
        (AlgorithmKind::PreduceSmart, 2, 4),
        (AlgorithmKind::PreduceStatic, 2, 2),
        (AlgorithmKind::AdpsgdPairwise, 2, 4),
        (AlgorithmKind::AllreduceGlobal, 2, 4),
        (AlgorithmKind::CentralizedPs, 1, 4),
    ];
    for (alg, nodes, per_node) in cases {
        let s = setup(alg, nodes, per_node);
        let out = run_threaded(&s, ThreadOptions::default()).unwrap();
        assert_eq!(out.iterations, vec![s.termination.max_iterations; s.workers()], "{alg}");
        if alg != AlgorithmKind::PreduceSmart {
            assert!(out.collectives >= 10, "{alg}: only {} collectives", out.collectives);
        }
        let replayed = replay(&s.model, &out.replay).unwrap();
        for (a, b) in replayed.iter().zip(&out.final_params) {
            assert!(a.max_abs_diff(b) < 1e-9, "{alg}");
        }
        if alg.uses_coordinator() {
            let stats = out.stats.unwrap();
            assert!(stats.grants > 0, "{alg}");
        }
    }
}

#[test]
fn coordinator_loss_aborts_cleanly() {
    let s = setup(AlgorithmKind::PreduceRandom, 2, 4);
    let options = ThreadOptions {
        coordinator_message_limit: Some(40),
        ..ThreadOptions::default()
    };
    match run_threaded(&s, options) {
        Err(TrainError::Aborted { reason, partial }) => {
            assert!(reason.contains("coordinator"), "{reason}");
            assert_eq!(partial.iterations.len(), s.workers());
            assert!(partial.iterations.iter().all(|&k| k < s.termination.max_iterations));
            assert!(!partial.trajectory.is_empty());
        }
        other => panic!("expected an abort, got {:?}", other.map(|o| o.status)),
    }
}

#[test]
fn simulated_traces_pass_analysis() {
    let cases = [
        (AlgorithmKind::PreduceRandom, 2, 4),
        (AlgorithmKind::PreduceSmart, 2, 4),
        (AlgorithmKind::PreduceStatic, 2, 2),
        (AlgorithmKind::AdpsgdPairwise, 2, 4),
        (AlgorithmKind::AllreduceGlobal, 2, 4),
        (AlgorithmKind::CentralizedPs, 2, 4),
    ];
    for (alg, nodes, per_node) in cases {
        let mut s = setup(alg, nodes, per_node);
        let n = s.workers();
        s.profile.slowdown = (0..n).map(|w| 1.0 + w as f64 * 0.3).collect();
        let out = run_simulated(&s).unwrap();
        let report = hetsync::analyze::analyze(&out.trace);
        assert!(report.is_clean(), "{alg}: {:?}", report.findings);
        assert_eq!(report.workers, n);
        assert!(report.groups > 0, "{alg}");
        for r in &report.sync_ratios {
            let sum = r.compute_fraction() + r.transfer_fraction() + r.wait_fraction();
            assert!((sum - 1.0).abs() < 1e-9, "{alg}: {sum}");
        }
    }
}

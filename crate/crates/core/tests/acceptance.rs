use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use hetsync::analyze::analyze;
use hetsync::collective::preduce_lockstep;
use hetsync::config::RunConfig;
use hetsync::gossip::{apply, group_matrix, pairwise_matrix, stack, unstack, GroupSpec, SyncMatrix};
use hetsync::model::{evaluate_loss, ParamVector};
use hetsync::policy::PolicySpec;
use hetsync::schedule::{RuleSource, ScheduleRule};
use hetsync::sim::{EventKind, SimEvent, Trace};
use hetsync::trainer::{measure_sync_ratio, run_simulated, write_trajectory_csv, AlgorithmKind, RunOutput, RunStatus};
use hetsync::transport::SimNetwork;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn config(text: &str) -> RunConfig {
    RunConfig::from_toml_str(text, Path::new(".")).expect("acceptance config parses")
}

fn run(cfg: &RunConfig) -> Result<RunOutput, String> {
    let setup = cfg.build().map_err(|e| e.to_string())?;
    run_simulated(&setup).map_err(|e| format!("{} seed {}: {e}", cfg.algorithm, cfg.seed))
}

// 1

/// `F^G` written out entry by entry.
fn expected_group_matrix(n: usize, members: &[usize]) -> DMatrix<f64> {
    let mut m = DMatrix::identity(n, n);
    for &i in members {
        for &j in members {
            m[(i, j)] = 1.0 / members.len() as f64;
        }
    }
    m
}

fn matrix_defects(w: &SyncMatrix, expected: &DMatrix<f64>) -> f64 {
    let m = w.as_matrix();
    let n = m.nrows();
    let mut worst: f64 = (m - expected).amax();
    for i in 0..n {
        worst = worst.max((m.row(i).sum() - 1.0).abs());
        worst = worst.max((m.column(i).sum() - 1.0).abs());
    }
    worst.max((m.transpose() * m - m).amax())
}

fn subsets(n: usize, k: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    fn all(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            all(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let count = (0..k).fold(1u128, |c, i| c * (n - i) as u128 / (i as u128 + 1));
    if count <= limit as u128 {
        let mut out = Vec::new();
        all(0, n, k, &mut Vec::new(), &mut out);
        return out;
    }
    let mut ids: Vec<usize> = (0..n).collect();
    (0..limit)
        .map(|_| {
            ids.shuffle(rng);
            ids[..k].to_vec()
        })
        .collect()
}

fn matrix_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for n in 1..=16 {
        for k in 1..=n {
            for members in subsets(n, k, 64, &mut rng) {
                let g = GroupSpec::new(members.clone(), n).map_err(|e| e.to_string())?;
                let w = group_matrix(n, &g).map_err(|e| e.to_string())?;
                worst = worst.max(matrix_defects(&w, &expected_group_matrix(n, &members)));
                checked += 1;
            }
        }
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let w = pairwise_matrix(n, i, j).map_err(|e| e.to_string())?;
                worst = worst.max(matrix_defects(&w, &expected_group_matrix(n, &[i, j])));
                checked += 1;
            }
        }
    }
    ensure(worst <= 1e-12, || {
        format!("max defect {worst:e} over {checked} matrices")
    })?;

    // Worker 0 averages with 3, then 4 averages with 3: x0 = (x0+x3)/2,
    // x3 = x4 = x0/4 + x3/4 + x4/2, columns being the new values.
    let mut fused = DMatrix::identity(5, 5);
    for (i, j, v) in [
        (0, 0, 0.5),
        (3, 0, 0.5),
        (0, 3, 0.25),
        (3, 3, 0.25),
        (4, 3, 0.5),
        (0, 4, 0.25),
        (3, 4, 0.25),
        (4, 4, 0.5),
    ] {
        fused[(i, j)] = v;
    }
    let a = pairwise_matrix(5, 0, 3).map_err(|e| e.to_string())?;
    let b = pairwise_matrix(5, 4, 3).map_err(|e| e.to_string())?;
    let product = a.then(&b);
    let err = (product.as_matrix() - &fused).amax();
    ensure(err <= 1e-12, || format!("fused product off by {err:e}"))?;
    Ok(format!(
        "{checked} matrices, max defect {worst:.1e}, fused product error {err:.1e}"
    ))
}

// 2

fn collective_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.random_range(1..=16);
        let len = rng.random_range(1..=256);
        let k = rng.random_range(1..=n);
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let g = GroupSpec::new(ids[..k].to_vec(), n).map_err(|e| e.to_string())?;
        let x: Vec<ParamVector> = (0..n)
            .map(|_| ParamVector::new((0..len).map(|_| rng.random_range(-100.0..100.0)).collect()))
            .collect();
        let expected =
            unstack(&apply(&stack(&x), &group_matrix(n, &g).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?);
        let mut net = SimNetwork::new(n);
        let inputs: Vec<&ParamVector> = g.members().iter().map(|&m| &x[m]).collect();
        let out = preduce_lockstep(&mut net, &g, case, &inputs).map_err(|e| format!("case {case}: {e}"))?;
        for (i, &m) in g.members().iter().enumerate() {
            let mean: Vec<f64> = (0..len)
                .map(|r| g.members().iter().map(|&c| x[c][r]).sum::<f64>() / k as f64)
                .collect();
            worst = worst
                .max(out[i].max_abs_diff(&expected[m]))
                .max(out[i].max_abs_diff(&ParamVector::new(mean)));
            ensure(out[i] == out[0], || format!("case {case}: members disagree"))?;
        }
    }
    ensure(worst <= 1e-12, || format!("max error {worst:e}"))?;
    Ok(format!("1000 instances, max error {worst:.1e}"))
}

// 3 and 11

fn stress_config(seed: u64) -> RunConfig {
    let (algorithm, extra, iterations) = match seed % 5 {
        0 => ("preduce-random", "", 750),
        1 => ("preduce-smart", "", 2400),
        2 => ("preduce-random", "group_size = 4\n", 750),
        3 => ("preduce-smart", "[coordinator]\ninter_intra = true\n", 2400),
        _ => ("preduce-smart", "[coordinator]\nc_thres = 0\n", 2400),
    };
    let (group_size, extra) = match extra.strip_prefix("group_size = 4\n") {
        Some(rest) => (4, rest),
        None => (3, extra),
    };
    config(&format!(
        r#"
seed = {seed}
algorithm = "{algorithm}"
group_size = {group_size}
eval_every = 100

[topology]
nodes = 4
per_node = 4

[model]
kind = "quadratic"
input_dim = 4

[data]
source = "synthetic-quadratic"
samples = 64
noise = 0.5

[optimizer]
learning_rate = 0.05
batch_size = 4

[termination]
max_iterations = {iterations}

[straggler]
factor = {factor}
workers = [{slow}]

[profile]
transfer_time_per_element = 0.01
{extra}"#,
        factor = 1.0 + (seed % 3) as f64,
        slow = seed % 16,
    ))
}

fn multi_member_groups(events: &[SimEvent]) -> usize {
    events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::PreduceStart { group, members } if members.len() > 1 => Some(*group),
            _ => None,
        })
        .collect::<BTreeSet<_>>()
        .len()
}

fn artifacts(cfg: &RunConfig, out: &RunOutput) -> (String, Vec<u8>) {
    let trace = Trace::from_events(out.trace.clone()).to_jsonl();
    let mut csv = Vec::new();
    write_trajectory_csv(&out.trajectory, &cfg.run_id(), &mut csv).expect("csv to memory");
    (trace, csv)
}

fn atomicity(reruns: &mut Vec<(String, Vec<u8>)>) -> Check {
    let mut least = usize::MAX;
    let mut names = Vec::new();
    for seed in 0..10 {
        let cfg = stress_config(seed);
        let out = run(&cfg)?;
        let report = analyze(&out.trace);
        let groups = multi_member_groups(&out.trace);
        least = least.min(groups);
        ensure(groups >= 10_000, || format!("seed {seed}: only {groups} groups"))?;
        ensure(out.status == RunStatus::Completed, || {
            format!("seed {seed}: {}", out.status.name())
        })?;
        ensure(report.is_clean() && report.deadlocks == 0, || {
            format!(
                "seed {seed}: {} violations, first {:?}",
                report.violations(),
                report.findings.first()
            )
        })?;
        ensure(report.cyclic_waits == 0 && report.partial_acquisitions == 0, || {
            format!("seed {seed}: {} cyclic waits", report.cyclic_waits)
        })?;
        names.push(format!(
            "{}{}",
            cfg.algorithm,
            if cfg.coordinator.inter_intra { "/ii" } else { "" }
        ));
        reruns.push(artifacts(&cfg, &out));
    }
    names.dedup();
    Ok(format!(
        "10 runs ({}), at least {least} groups each, 0 violations",
        names.join(", ")
    ))
}

fn determinism(first: &[(String, Vec<u8>)]) -> Check {
    ensure(first.len() == 10, || "criterion 3 runs missing".into())?;
    let mut bytes = 0;
    for (seed, before) in first.iter().enumerate() {
        let cfg = stress_config(seed as u64);
        let again = artifacts(&cfg, &run(&cfg)?);
        ensure(&again == before, || format!("seed {seed}: rerun differs"))?;
        bytes += before.0.len() + before.1.len();
    }
    Ok(format!(
        "10 reruns byte-identical ({:.1} MB compared)",
        bytes as f64 / 1e6
    ))
}

// 4

fn spectral_gap() -> Check {
    let connected = [
        PolicySpec::RandomGroups {
            workers: 16,
            group_size: 3,
        },
        PolicySpec::StaticSchedule {
            workers: 16,
            rule: RuleSource::Builtin4x4,
        },
        PolicySpec::InterIntra {
            nodes: 4,
            per_node: 4,
            group_size: 3,
        },
    ];
    let mut parts = Vec::new();
    for p in &connected {
        let rho = p.analyze(4000, 4).map_err(|e| e.to_string())?.rho;
        ensure(rho < 1.0 - 1e-3, || format!("{p:?}: rho {rho}"))?;
        parts.push(format!("{rho:.4}"));
    }
    let halves = PolicySpec::DisconnectedHalves {
        workers: 16,
        group_size: 3,
    };
    let rho = halves.analyze(4000, 4).map_err(|e| e.to_string())?.rho;
    ensure((rho - 1.0).abs() <= 1e-6, || format!("disconnected halves: rho {rho}"))?;
    Ok(format!(
        "rho random/static/inter-intra = {}, disconnected = {rho:.9}",
        parts.join("/")
    ))
}

// 5

fn schedule_for(alg: AlgorithmKind, nodes: usize, per_node: usize) -> String {
    if alg == AlgorithmKind::PreduceStatic {
        format!("[schedule]\nkind = \"generalized\"\nnodes = {nodes}\nper_node = {per_node}\n")
    } else {
        String::new()
    }
}

fn quadratic_optimum() -> Check {
    let mut worst: f64 = 0.0;
    for alg in AlgorithmKind::ALL {
        let cfg = config(&format!(
            r#"
seed = 5
algorithm = "{alg}"
group_size = 3

[topology]
nodes = 2
per_node = 4

[model]
kind = "quadratic"
input_dim = 8
init_scale = 2.0

[data]
source = "synthetic-quadratic"
samples = 32
noise = 0.0

[optimizer]
learning_rate = 0.1
batch_size = 4

[termination]
max_iterations = 400

{}"#,
            schedule_for(alg, 2, 4)
        ));
        let setup = cfg.build().map_err(|e| e.to_string())?;
        let data = setup.model.train_set();
        let mut optimum = vec![0.0; 8];
        for i in 0..data.len() {
            for (o, a) in optimum.iter_mut().zip(data.sample(i).0) {
                *o += a / data.len() as f64;
            }
        }
        let optimum = ParamVector::new(optimum);
        let out = run(&cfg)?;
        let err = out.params.iter().map(|p| p.max_abs_diff(&optimum)).fold(0.0, f64::max);
        ensure(err <= 1e-6, || format!("{alg}: {err:e} from the optimum"))?;
        worst = worst.max(err);
    }
    Ok(format!("all 6 algorithms within {worst:.1e} of the optimum"))
}

fn logistic_text(alg: AlgorithmKind, extra: &str) -> String {
    format!(
        r#"
seed = 6
algorithm = "{alg}"
group_size = 3
eval_every = 5

[topology]
nodes = 2
per_node = 4

[model]
kind = "logistic-regression"
input_dim = 6

[data]
source = "synthetic-classification"
train_samples = 400
eval_samples = 400
label_noise = 0.05

[optimizer]
learning_rate = 0.2
batch_size = 8

{extra}
{}"#,
        schedule_for(alg, 2, 4)
    )
}

fn logistic_consensus() -> Check {
    let oracle = config(&logistic_text(
        AlgorithmKind::CentralizedPs,
        "[termination]\nmax_iterations = 3000\n",
    ));
    let setup = oracle.build().map_err(|e| e.to_string())?;
    let out = run(&oracle)?;
    let best = evaluate_loss(&setup.model, &out.params[0], &setup.eval_set).map_err(|e| e.to_string())?;
    let threshold = best + 0.01;
    let mut parts = Vec::new();
    for alg in AlgorithmKind::ALL.into_iter().filter(|a| a.is_decentralized()) {
        let cfg = config(&logistic_text(
            alg,
            &format!("[termination]\nmax_iterations = 6000\nloss_threshold = {threshold}\n"),
        ));
        let out = run(&cfg)?;
        let hit = out
            .threshold
            .as_ref()
            .ok_or_else(|| format!("{alg}: never reached {threshold:.4}"))?;
        let dist = out.max_pairwise_distance();
        ensure(dist <= 1e-2, || format!("{alg}: distance {dist:e} after cooldown"))?;
        parts.push(format!("{alg} @{} d={dist:.1e}", hit.iteration));
    }
    Ok(format!(
        "oracle loss {best:.4}, threshold {threshold:.4}: {}",
        parts.join(", ")
    ))
}

fn convergence() -> Check {
    let a = quadratic_optimum()?;
    let b = logistic_consensus()?;
    Ok(format!("{a}; {b}"))
}

// 6

fn section_length() -> Check {
    let lengths = [1u64, 2, 4, 8];
    let seeds = 0..32u64;
    let mut means = Vec::new();
    for l in lengths {
        let mut total = 0u64;
        for seed in seeds.clone() {
            let cfg = config(&format!(
                r#"
seed = {seed}
algorithm = "preduce-random"
group_size = 3
section_length = {l}
eval_every = 1
trace = false

[topology]
nodes = 2
per_node = 4

[model]
kind = "quadratic"
input_dim = 8
init_scale = 2.0

[data]
source = "synthetic-quadratic"
samples = 256
noise = 1.0

[optimizer]
learning_rate = 0.2
batch_size = 2

[termination]
max_iterations = 20000
loss_threshold = {threshold}
"#,
                threshold = SECTION_THRESHOLD + noise_floor(),
            ));
            let out = run(&cfg)?;
            let hit = out
                .threshold
                .ok_or_else(|| format!("L={l} seed {seed}: threshold not reached"))?;
            total += hit.iteration;
        }
        means.push(total as f64 / seeds.clone().count() as f64);
    }
    let text = lengths
        .iter()
        .zip(&means)
        .map(|(l, m)| format!("L={l}: {m:.1}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(means.windows(2).all(|w| w[0] <= w[1]), || {
        format!("not monotone: {text}")
    })?;
    Ok(format!("mean iterations to threshold over 32 seeds: {text}"))
}

/// Excess loss above the minimum that counts as converged. Sits below the
/// stationary noise of a lone worker at this step size.
const SECTION_THRESHOLD: f64 = 0.02;

/// Loss at the optimum of the section-length dataset.
fn noise_floor() -> f64 {
    let data = hetsync::model::Dataset::synthetic_quadratic(8, 256, 1.0, 1).expect("dataset");
    let mut mean = vec![0.0; 8];
    for i in 0..data.len() {
        for (m, a) in mean.iter_mut().zip(data.sample(i).0) {
            *m += a / data.len() as f64;
        }
    }
    (0..data.len())
        .map(|i| {
            data.sample(i)
                .0
                .iter()
                .zip(&mean)
                .map(|(a, m)| 0.5 * (a - m).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / data.len() as f64
}

// 7

fn heterogeneity() -> Check {
    let time = |alg: AlgorithmKind, slowdown: f64| -> Result<f64, String> {
        let mut total = 0.0;
        for seed in 1..=3 {
            let cfg = config(&format!(
                r#"
seed = {seed}
algorithm = "{alg}"
group_size = 3
trace = false

[topology]
nodes = 4
per_node = 4

[model]
kind = "quadratic"
input_dim = 16

[data]
source = "synthetic-quadratic"
samples = 256
noise = 0.0

[optimizer]
learning_rate = 0.1
batch_size = 8

[termination]
max_iterations = 2000
loss_threshold = 0.01

[profile]
transfer_time_per_element = 0.002

[straggler]
factor = {slowdown}
"#
            ));
            let out = run(&cfg)?;
            total += out
                .threshold
                .ok_or_else(|| format!("{alg} slowdown {slowdown} seed {seed}: threshold not reached"))?
                .time;
        }
        Ok(total / 3.0)
    };
    let mut ratios = Vec::new();
    for alg in [
        AlgorithmKind::AllreduceGlobal,
        AlgorithmKind::PreduceSmart,
        AlgorithmKind::AdpsgdPairwise,
    ] {
        ratios.push((alg, time(alg, 5.0)? / time(alg, 1.0)?));
    }
    let allreduce = ratios[0].1;
    let text = ratios
        .iter()
        .map(|(a, r)| format!("{a} {r:.2}x"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(allreduce >= 3.0, || format!("allreduce only {allreduce:.2}x: {text}"))?;
    ensure(ratios[1..].iter().all(|(_, r)| *r < allreduce), || {
        format!("wrong direction: {text}")
    })?;
    Ok(format!("hetero/homo time: {text}"))
}

// 8

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct ConflictBaseline {
    workers: usize,
    group_size: usize,
    syncs: usize,
    seed: u64,
    grants: u64,
    conflicts_queued: u64,
    conflict_rate: f64,
}

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/random_conflict_rate.json")
}

fn conflict_run(alg: AlgorithmKind) -> Result<(usize, hetsync::coordinator::CoordinatorStats), String> {
    let cfg = config(&format!(
        r#"
seed = 8
algorithm = "{alg}"
group_size = 3
eval_every = 1000

[topology]
nodes = 4
per_node = 4

[model]
kind = "quadratic"
input_dim = 16

[data]
source = "synthetic-quadratic"
samples = 64
noise = 0.5

[optimizer]
learning_rate = 0.05
batch_size = 4

[termination]
max_iterations = 125
"#
    ));
    let out = run(&cfg)?;
    let syncs = out
        .trace
        .iter()
        .filter(|e| matches!(e.kind, EventKind::GgRequest))
        .count();
    Ok((syncs, out.stats.ok_or("no coordinator stats")?))
}

fn conflict_reduction() -> Check {
    let (syncs, random) = conflict_run(AlgorithmKind::PreduceRandom)?;
    let measured = ConflictBaseline {
        workers: 16,
        group_size: 3,
        syncs,
        seed: 8,
        grants: random.grants,
        conflicts_queued: random.conflicts_queued,
        conflict_rate: random.conflict_rate(),
    };
    let path = fixture_path();
    if std::env::var_os("HETSYNC_BLESS").is_some() {
        let text = serde_json::to_string_pretty(&measured).map_err(|e| e.to_string())?;
        fs::write(&path, text + "\n").map_err(|e| e.to_string())?;
    }
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let baseline: ConflictBaseline = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure(baseline == measured, || {
        format!("random baseline drifted from the fixture: {measured:?}")
    })?;
    let (smart_syncs, smart) = conflict_run(AlgorithmKind::PreduceSmart)?;
    ensure(syncs >= 2000 && smart_syncs >= 2000, || {
        format!("only {syncs}/{smart_syncs} syncs")
    })?;
    let rate = smart.conflict_rate();
    ensure(rate <= 0.3 * baseline.conflict_rate, || {
        format!("smart {rate:.4} vs random {:.4}", baseline.conflict_rate)
    })?;
    Ok(format!(
        "{syncs} syncs, random {:.4} (fixture), smart {rate:.4}",
        baseline.conflict_rate
    ))
}

// 9

fn sync_ratio() -> Check {
    let dim = 16;
    let cfg = config(&format!(
        r#"
seed = 9
algorithm = "adpsgd-pairwise"
group_size = 2

[topology]
nodes = 1
per_node = 8

[model]
kind = "quadratic"
input_dim = {dim}

[data]
source = "synthetic-quadratic"
samples = 64
noise = 0.5

[optimizer]
learning_rate = 0.05
batch_size = 4

[termination]
max_iterations = 200

[profile]
base_compute_time = 1.0
transfer_time_per_element = {t}
intra_node_latency = 0.0
coordinator_latency = 0.0
"#,
        t = 10.0 / dim as f64,
    ));
    let out = run(&cfg)?;
    let ratios = measure_sync_ratio(&out.trace, 8);
    let mut least: f64 = 1.0;
    let mut worst_sum: f64 = 0.0;
    for r in &ratios {
        let sum = r.compute_fraction() + r.transfer_fraction() + r.wait_fraction();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        least = least.min(r.sync_fraction());
    }
    ensure(ratios.len() == 8, || format!("{} ratios", ratios.len()))?;
    ensure(worst_sum <= 1e-9, || format!("fractions sum off by {worst_sum:e}"))?;
    ensure(least > 0.9, || format!("sync fraction {least:.4}"))?;
    Ok(format!("min sync fraction {least:.4}, max |sum - 1| {worst_sum:.1e}"))
}

// 10

fn schedule_validity() -> Check {
    let mut rules = vec![("builtin-4x4".to_string(), ScheduleRule::builtin_4x4())];
    for (nodes, m) in [(2, 2), (4, 4), (8, 4)] {
        rules.push((
            format!("generalized({nodes},{m})"),
            ScheduleRule::generalized(nodes, m).map_err(|e| e.to_string())?,
        ));
    }
    for (name, rule) in &rules {
        rule.validate_conflict_free().map_err(|v| format!("{name}: {v}"))?;
        ensure(rule.cycle_connected(), || format!("{name}: disconnected"))?;
    }
    Ok(format!(
        "{} conflict-free and connected",
        rules.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(", ")
    ))
}

fn main() -> ExitCode {
    let mut stress = Vec::new();
    let mut failed = 0;
    let mut report = |id: u32, name: &str, budget: f64, check: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match result {
            Ok(d) if secs <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {detail} [{secs:.2} s / {budget} s]",
            if ok { "PASS" } else { "FAIL" }
        );
    };
    report(1, "matrix correctness", 1.0, &mut matrix_correctness);
    report(2, "collective matches matrix", 30.0, &mut collective_oracle);
    report(3, "atomicity and deadlock freedom", 300.0, &mut || {
        atomicity(&mut stress)
    });
    report(4, "spectral gap", 60.0, &mut spectral_gap);
    report(5, "convergence", 300.0, &mut convergence);
    report(6, "section length monotonicity", 120.0, &mut section_length);
    report(7, "heterogeneity direction", 600.0, &mut heterogeneity);
    report(8, "conflict reduction", 300.0, &mut conflict_reduction);
    report(9, "sync ratio", 120.0, &mut sync_ratio);
    report(10, "static schedule validity", 1.0, &mut schedule_validity);
    report(11, "determinism", 300.0, &mut || determinism(&stress));
    if failed == 0 {
        println!("all 11 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

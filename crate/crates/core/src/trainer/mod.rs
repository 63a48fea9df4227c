//! Per-worker training loops for the group-averaging algorithm and its
//! baselines, run on the discrete-event simulator or on real threads.

mod sim_run;
mod threads;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collective::CollectiveError;
use crate::coordinator::{global_division, CoordinatorStats, GgPolicy, ProtocolError};
use crate::gossip::{apply, group_matrix, GossipError, GroupSpec};
use crate::model::{compute_gradient, sgd_step, DataBatch, Dataset, Model, ModelError, OptimizerConfig, ParamVector};
use crate::schedule::ScheduleRule;
use crate::sim::{EventKind, HeterogeneityProfile, SimEvent};
use crate::topology::NodeMap;

pub use sim_run::run_simulated;
pub use threads::{run_threaded, ThreadOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    PreduceRandom,
    PreduceSmart,
    PreduceStatic,
    AdpsgdPairwise,
    AllreduceGlobal,
    CentralizedPs,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 6] = [
        AlgorithmKind::PreduceRandom,
        AlgorithmKind::PreduceSmart,
        AlgorithmKind::PreduceStatic,
        AlgorithmKind::AdpsgdPairwise,
        AlgorithmKind::AllreduceGlobal,
        AlgorithmKind::CentralizedPs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::PreduceRandom => "preduce-random",
            AlgorithmKind::PreduceSmart => "preduce-smart",
            AlgorithmKind::PreduceStatic => "preduce-static",
            AlgorithmKind::AdpsgdPairwise => "adpsgd-pairwise",
            AlgorithmKind::AllreduceGlobal => "allreduce-global",
            AlgorithmKind::CentralizedPs => "centralized-ps",
        }
    }

    /// Whether groups come from the coordinator.
    pub fn uses_coordinator(self) -> bool {
        matches!(
            self,
            AlgorithmKind::PreduceRandom | AlgorithmKind::PreduceSmart | AlgorithmKind::AdpsgdPairwise
        )
    }

    pub fn is_decentralized(self) -> bool {
        !matches!(self, AlgorithmKind::AllreduceGlobal | AlgorithmKind::CentralizedPs)
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AlgorithmKind::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Termination {
    /// Iterations each worker runs before it stops computing.
    pub max_iterations: u64,
    /// Stop once worker 0's evaluation loss is at or below this.
    pub loss_threshold: Option<f64>,
    /// Stop when virtual time passes this.
    pub time_cap: Option<f64>,
}

/// Everything one training run needs, already resolved and validated.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub model: Model,
    pub eval_set: Arc<Dataset>,
    pub optimizer: OptimizerConfig,
    pub nodes: NodeMap,
    pub algorithm: AlgorithmKind,
    pub section_length: u64,
    pub group_size: usize,
    pub c_thres: Option<u64>,
    pub inter_intra: bool,
    pub schedule: Option<ScheduleRule>,
    pub profile: HeterogeneityProfile,
    pub termination: Termination,
    pub init: ParamVector,
    pub seed: u64,
    pub eval_every: u64,
    pub cooldown_rounds: usize,
    pub cache_capacity: usize,
    pub record_trace: bool,
}

impl TrainSetup {
    pub fn workers(&self) -> usize {
        self.nodes.workers()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let n = self.workers();
        let bad = |m: String| Err(TrainError::Config(m));
        if self.init.len() != self.model.num_params() {
            return bad(format!(
                "initial parameters have {} entries, model needs {}",
                self.init.len(),
                self.model.num_params()
            ));
        }
        if self.section_length == 0 {
            return bad("section_length must be positive".into());
        }
        if self.algorithm == AlgorithmKind::CentralizedPs && self.section_length != 1 {
            return bad("centralized-ps synchronizes every iteration; section_length must be 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.optimizer.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        let k = self.effective_group_size();
        if k == 0 || k > n {
            return bad(format!("group_size {k} outside 1..={n}"));
        }
        if self.algorithm == AlgorithmKind::PreduceStatic {
            match &self.schedule {
                Some(rule) if rule.workers() == n => {
                    if let Err(v) = rule.validate_conflict_free() {
                        return bad(format!("static schedule: {v}"));
                    }
                }
                Some(rule) => return bad(format!("schedule covers {} workers, run has {n}", rule.workers())),
                None => return bad("preduce-static needs a schedule".into()),
            }
        }
        self.profile.validate(n).map_err(|e| TrainError::Config(e.to_string()))
    }

    /// Group size actually used: pairwise averaging is size 2.
    pub fn effective_group_size(&self) -> usize {
        match self.algorithm {
            AlgorithmKind::AdpsgdPairwise => 2.min(self.workers()),
            _ => self.group_size,
        }
    }

    pub fn gg_policy(&self) -> Option<GgPolicy> {
        let seed = derive_seed(self.seed, 1);
        let k = self.effective_group_size();
        match self.algorithm {
            AlgorithmKind::PreduceRandom | AlgorithmKind::AdpsgdPairwise => Some(GgPolicy::random(k, seed)),
            AlgorithmKind::PreduceSmart => Some(GgPolicy::smart(
                k,
                self.c_thres,
                self.inter_intra.then(|| self.nodes.clone()),
                seed,
            )),
            _ => None,
        }
    }
}

/// Independent seed for sub-stream `stream` of a run (splitmix64).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn worker_rng(seed: u64, worker: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + worker as u64))
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid run setup: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Gossip(#[from] GossipError),
    #[error("run aborted: {reason}")]
    Aborted { reason: String, partial: Box<PartialRun> },
    #[error("replay log is inconsistent: {0}")]
    Replay(String),
}

/// What survived an aborted run.
#[derive(Clone, Debug, Default)]
pub struct PartialRun {
    pub trajectory: Vec<TrajectoryRow>,
    pub iterations: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub worker: usize,
    pub iteration: u64,
    pub virtual_time: f64,
    pub loss: f64,
    pub event_kind: String,
}

/// One entry of a run's serial history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum ReplayOp {
    Step {
        worker: usize,
        iteration: u64,
        indices: Vec<usize>,
        lr: f64,
    },
    Average {
        members: Vec<usize>,
    },
}

/// Serial history of a run: replaying it from `init` reproduces the final
/// parameters. Ops from `cooldown_start` on belong to the cooldown rounds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayLog {
    pub workers: usize,
    pub init: ParamVector,
    pub ops: Vec<ReplayOp>,
    pub cooldown_start: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaitEdge {
    pub worker: usize,
    pub state: String,
    pub waiting_for: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    ThresholdReached,
    TimeCap,
    Deadlock { waits: Vec<WaitEdge> },
}

impl RunStatus {
    pub fn name(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::ThresholdReached => "threshold-reached",
            RunStatus::TimeCap => "time-cap",
            RunStatus::Deadlock { .. } => "deadlock",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdHit {
    pub iteration: u64,
    pub time: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub status: RunStatus,
    /// Parameters when the run stopped, before cooldown.
    pub params: Vec<ParamVector>,
    /// Parameters after the cooldown rounds.
    pub final_params: Vec<ParamVector>,
    pub iterations: Vec<u64>,
    pub trajectory: Vec<TrajectoryRow>,
    pub trace: Vec<SimEvent>,
    pub replay: ReplayLog,
    pub stats: Option<CoordinatorStats>,
    pub threshold: Option<ThresholdHit>,
    /// Virtual time (seconds of wall clock for the threaded backend).
    pub end_time: f64,
    pub collectives: u64,
}

impl RunOutput {
    pub fn max_pairwise_distance(&self) -> f64 {
        max_pairwise_distance(&self.final_params)
    }
}

/// Write trajectory rows as CSV, each prefixed with `run_id`.
pub fn write_trajectory_csv<W: std::io::Write>(rows: &[TrajectoryRow], run_id: &str, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run_id", "worker", "iteration", "virtual_time", "loss", "event_kind"])?;
    for r in rows {
        w.write_record([
            run_id,
            &r.worker.to_string(),
            &r.iteration.to_string(),
            &r.virtual_time.to_string(),
            &r.loss.to_string(),
            &r.event_kind,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn max_pairwise_distance(params: &[ParamVector]) -> f64 {
    let mut worst = 0.0f64;
    for (i, a) in params.iter().enumerate() {
        for b in &params[i + 1..] {
            worst = worst.max(a.distance(b));
        }
    }
    worst
}

/// Replace every member's vector with the members' mean.
pub(crate) fn average_members(params: &mut [ParamVector], members: &[usize]) {
    let len = params[members[0]].len();
    let mut mean = vec![0.0; len];
    for &m in members {
        for (acc, v) in mean.iter_mut().zip(params[m].iter()) {
            *acc += v;
        }
    }
    let scale = members.len() as f64;
    mean.iter_mut().for_each(|v| *v /= scale);
    for &m in members {
        params[m] = ParamVector::new(mean.clone());
    }
}

/// Groups for each cooldown round: the algorithm's own grouping applied to
/// all workers at once, or one full cycle of a static schedule.
pub(crate) fn cooldown_groups(setup: &TrainSetup, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = setup.workers();
    match setup.algorithm {
        AlgorithmKind::PreduceRandom | AlgorithmKind::PreduceSmart | AlgorithmKind::AdpsgdPairwise => {
            use rand::Rng;
            let initiator = rng.random_range(0..n);
            let all: Vec<usize> = (0..n).collect();
            global_division(rng, n, setup.effective_group_size(), initiator, &all)
                .into_iter()
                .map(|g| g.members().to_vec())
                .collect()
        }
        AlgorithmKind::PreduceStatic => {
            let rule = setup.schedule.as_ref().expect("validated");
            rule.phases().iter().flat_map(|p| p.groups.clone()).collect()
        }
        AlgorithmKind::AllreduceGlobal | AlgorithmKind::CentralizedPs => vec![(0..n).collect()],
    }
}

/// Apply the cooldown rounds to `params`, logging them.
pub(crate) fn run_cooldown(setup: &TrainSetup, params: &mut [ParamVector], log: &mut Vec<ReplayOp>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.seed, 2));
    for _ in 0..setup.cooldown_rounds {
        for members in cooldown_groups(setup, &mut rng) {
            if members.len() > 1 {
                average_members(params, &members);
                log.push(ReplayOp::Average { members });
            }
        }
    }
}

/// Re-execute `ops` serially from `init`: gradient steps through the model,
/// averages through the group matrices.
pub fn replay_ops(
    model: &Model,
    workers: usize,
    init: &ParamVector,
    ops: &[ReplayOp],
) -> Result<Vec<ParamVector>, TrainError> {
    let mut x: DMatrix<f64> = DMatrix::from_fn(init.len(), workers, |r, _| init[r]);
    for op in ops {
        match op {
            ReplayOp::Step {
                worker,
                iteration,
                indices,
                lr,
            } => {
                if *worker >= workers {
                    return Err(TrainError::Replay(format!("step names worker {worker}")));
                }
                let p = ParamVector::new(x.column(*worker).iter().copied().collect());
                let grad = compute_gradient(model, &p, &DataBatch::new(indices.clone()))
                    .map_err(|e| e.at_iteration(*iteration))?;
                let next = sgd_step(&p, &grad, *lr)?;
                x.column_mut(*worker).copy_from_slice(&next);
            }
            ReplayOp::Average { members } => {
                let g = GroupSpec::new(members.clone(), workers)?;
                x = apply(&x, &group_matrix(workers, &g)?)?;
            }
        }
    }
    Ok(x.column_iter()
        .map(|c| ParamVector::new(c.iter().copied().collect()))
        .collect())
}

pub fn replay(model: &Model, log: &ReplayLog) -> Result<Vec<ParamVector>, TrainError> {
    replay_ops(model, log.workers, &log.init, &log.ops)
}

/// Time split of one worker over a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncRatio {
    pub worker: usize,
    pub compute: f64,
    pub transfer: f64,
    pub wait: f64,
    pub total: f64,
}

impl SyncRatio {
    pub fn compute_fraction(&self) -> f64 {
        self.fraction(self.compute)
    }

    pub fn transfer_fraction(&self) -> f64 {
        self.fraction(self.transfer)
    }

    pub fn wait_fraction(&self) -> f64 {
        self.fraction(self.wait)
    }

    /// Share of the run spent synchronizing: waiting plus transferring.
    pub fn sync_fraction(&self) -> f64 {
        self.wait_fraction() + self.transfer_fraction()
    }

    fn fraction(&self, part: f64) -> f64 {
        if self.total > 0.0 {
            part / self.total
        } else {
            0.0
        }
    }
}

/// Per-worker compute / transfer / wait split from a trace. Time not spent
/// computing or inside a collective counts as waiting; the run spans from 0
/// to its last event.
pub fn measure_sync_ratio(events: &[SimEvent], workers: usize) -> Vec<SyncRatio> {
    let end = events.iter().map(|e| e.time).fold(0.0f64, f64::max);
    let mut compute = vec![0.0; workers];
    let mut transfer = vec![0.0; workers];
    let mut compute_open: Vec<Option<f64>> = vec![None; workers];
    let mut transfer_open: Vec<Option<f64>> = vec![None; workers];
    for e in events {
        let Some(w) = e.worker.filter(|&w| w < workers) else {
            continue;
        };
        match e.kind {
            EventKind::ComputeStart { .. } => compute_open[w] = Some(e.time),
            EventKind::ComputeEnd { .. } => {
                if let Some(s) = compute_open[w].take() {
                    compute[w] += e.time - s;
                }
            }
            EventKind::PreduceStart { .. } => transfer_open[w] = Some(e.time),
            EventKind::PreduceEnd { .. } => {
                if let Some(s) = transfer_open[w].take() {
                    transfer[w] += e.time - s;
                }
            }
            _ => {}
        }
    }
    (0..workers)
        .map(|w| {
            let c = compute[w] + compute_open[w].map_or(0.0, |s| end - s);
            let t = transfer[w] + transfer_open[w].map_or(0.0, |s| end - s);
            SyncRatio {
                worker: w,
                compute: c,
                transfer: t,
                wait: (end - c - t).max(0.0),
                total: end,
            }
        })
        .collect()
}

//! The training loop on real threads: one per worker plus one for the
//! coordinator, communicating only through channels.

use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};

use super::{
    run_cooldown, worker_rng, AlgorithmKind, PartialRun, ReplayLog, ReplayOp, RunOutput, RunStatus, TrainError,
    TrainSetup, TrajectoryRow,
};
use crate::collective::preduce;
use crate::coordinator::{Coordinator, CoordinatorStats, GgMode, ToCoordinator, ToWorker};
use crate::gossip::GroupSpec;
use crate::model::{compute_gradient, evaluate_loss, sgd_step, DataBatch, ParamVector};
use crate::schedule::Assignment;
use crate::transport::ThreadEndpoint;

#[derive(Clone, Copy, Debug)]
pub struct ThreadOptions {
    /// Longest a worker waits for a peer or for the coordinator.
    pub timeout: Duration,
    /// Make the coordinator exit after this many messages, closing its
    /// channels mid-run.
    pub coordinator_message_limit: Option<usize>,
}

impl Default for ThreadOptions {
    fn default() -> Self {
        ThreadOptions {
            timeout: Duration::from_secs(30),
            coordinator_message_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum LocalOp {
    Step {
        iteration: u64,
        indices: Vec<usize>,
        lr: f64,
    },
    Average {
        key: u64,
        members: Vec<usize>,
    },
}

struct WorkerResult {
    params: ParamVector,
    iteration: u64,
    ops: Vec<LocalOp>,
    trajectory: Vec<TrajectoryRow>,
}

enum WorkerFailure {
    Aborted { reason: String, partial: WorkerResult },
    Error(TrainError),
}

struct WorkerCtx<'a> {
    setup: &'a TrainSetup,
    id: usize,
    link: ThreadEndpoint,
    to_coord: Option<Sender<ToCoordinator>>,
    from_coord: Option<Receiver<ToWorker>>,
    options: ThreadOptions,
    start: Instant,
    state: WorkerResult,
}

/// Run `setup` with real concurrency. Stops on the iteration cap only; the
/// result's replay log is one serialization consistent with every worker's
/// local history.
pub fn run_threaded(setup: &TrainSetup, options: ThreadOptions) -> Result<RunOutput, TrainError> {
    setup.validate()?;
    let n = setup.workers();
    let start = Instant::now();
    let policy = setup.gg_policy();
    let (coord_tx, coord_rx) = crossbeam_channel::unbounded::<ToCoordinator>();
    let mut worker_txs = Vec::new();
    let mut worker_rxs = Vec::new();
    for _ in 0..n {
        let (tx, rx) = crossbeam_channel::unbounded::<ToWorker>();
        worker_txs.push(tx);
        worker_rxs.push(rx);
    }
    let endpoints = ThreadEndpoint::mesh(n);

    let (results, stats) = thread::scope(|scope| {
        let coordinator = policy.map(|p| {
            let rx = coord_rx;
            let txs = worker_txs;
            let limit = options.coordinator_message_limit;
            scope.spawn(move || coordinator_loop(Coordinator::new(n, p)?, rx, txs, limit))
        });
        let handles: Vec<_> = endpoints
            .into_iter()
            .zip(worker_rxs)
            .enumerate()
            .map(|(id, (link, rx))| {
                let uses_coord = coordinator.is_some();
                let ctx = WorkerCtx {
                    setup,
                    id,
                    link,
                    to_coord: uses_coord.then(|| coord_tx.clone()),
                    from_coord: uses_coord.then_some(rx),
                    options,
                    start,
                    state: WorkerResult {
                        params: setup.init.clone(),
                        iteration: 0,
                        ops: Vec::new(),
                        trajectory: Vec::new(),
                    },
                };
                scope.spawn(move || ctx.run())
            })
            .collect();
        drop(coord_tx);
        let results: Vec<_> = handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect();
        let stats = coordinator.map(|h| h.join().expect("coordinator thread panicked"));
        (results, stats)
    });
    let end_time = start.elapsed().as_secs_f64();

    let mut done = Vec::with_capacity(n);
    let mut abort: Option<String> = None;
    let mut partial = PartialRun::default();
    for r in results {
        match r {
            Ok(res) => done.push(res),
            Err(WorkerFailure::Error(e)) => return Err(e),
            Err(WorkerFailure::Aborted { reason, partial: res }) => {
                abort.get_or_insert(reason);
                done.push(res);
            }
        }
    }
    let stats = match stats {
        Some(Ok(s)) => Some(s),
        Some(Err(e)) if abort.is_none() => return Err(e),
        Some(Err(e)) => {
            abort = Some(format!("{}; coordinator: {e}", abort.unwrap_or_default()));
            None
        }
        None => None,
    };
    if let Some(reason) = abort {
        for r in &done {
            partial.trajectory.extend(r.trajectory.iter().cloned());
            partial.iterations.push(r.iteration);
        }
        return Err(TrainError::Aborted {
            reason,
            partial: Box::new(partial),
        });
    }

    let logs: Vec<Vec<LocalOp>> = done.iter_mut().map(|r| std::mem::take(&mut r.ops)).collect();
    let mut ops = merge_logs(&logs)?;
    let params: Vec<ParamVector> = done.iter().map(|r| r.params.clone()).collect();
    let mut trajectory: Vec<TrajectoryRow> = done
        .iter_mut()
        .flat_map(|r| std::mem::take(&mut r.trajectory))
        .collect();
    for (w, p) in params.iter().enumerate() {
        trajectory.push(TrajectoryRow {
            worker: w,
            iteration: done[w].iteration,
            virtual_time: end_time,
            loss: evaluate_loss(&setup.model, p, &setup.eval_set)?,
            event_kind: "final".into(),
        });
    }
    let cooldown_start = ops.len();
    let mut final_params = params.clone();
    run_cooldown(setup, &mut final_params, &mut ops);
    if setup.cooldown_rounds > 0 {
        for (w, p) in final_params.iter().enumerate() {
            trajectory.push(TrajectoryRow {
                worker: w,
                iteration: done[w].iteration,
                virtual_time: end_time,
                loss: evaluate_loss(&setup.model, p, &setup.eval_set)?,
                event_kind: "cooldown".into(),
            });
        }
    }
    let collectives = logs
        .iter()
        .flatten()
        .filter(|op| matches!(op, LocalOp::Average { .. }))
        .count() as u64;
    Ok(RunOutput {
        status: RunStatus::Completed,
        params,
        final_params,
        iterations: done.iter().map(|r| r.iteration).collect(),
        trajectory,
        trace: Vec::new(),
        replay: ReplayLog {
            workers: n,
            init: setup.init.clone(),
            ops,
            cooldown_start,
        },
        stats,
        threshold: None,
        end_time,
        collectives,
    })
}

fn coordinator_loop(
    mut coord: Coordinator,
    rx: Receiver<ToCoordinator>,
    txs: Vec<Sender<ToWorker>>,
    limit: Option<usize>,
) -> Result<CoordinatorStats, TrainError> {
    let mut handled = 0usize;
    while let Ok(msg) = rx.recv() {
        if limit.is_some_and(|l| handled >= l) {
            break;
        }
        handled += 1;
        let decision = coord.handle(&msg)?;
        let mut shutdown = false;
        for (w, m) in decision.outbound {
            shutdown |= m == ToWorker::Shutdown;
            let _ = txs[w].send(m);
        }
        if shutdown {
            break;
        }
    }
    Ok(coord.stats())
}

impl WorkerCtx<'_> {
    fn run(mut self) -> Result<WorkerResult, WorkerFailure> {
        match self.train() {
            Ok(()) => Ok(self.state),
            Err(Fail::Abort(reason)) => Err(WorkerFailure::Aborted {
                reason,
                partial: self.state,
            }),
            Err(Fail::Error(e)) => Err(WorkerFailure::Error(e)),
        }
    }

    fn train(&mut self) -> Result<(), Fail> {
        let setup = self.setup;
        let mut rng = worker_rng(setup.seed, self.id);
        let mode = setup.gg_policy().map(|p| p.mode);
        if self.id == 0 {
            self.evaluate()?;
        }
        let mut round = 0u64;
        while self.state.iteration < setup.termination.max_iterations {
            if mode == Some(GgMode::Random) {
                while let Some(msg) = self.try_recv_grant()? {
                    self.execute_grant(msg)?;
                }
            }
            let k = self.state.iteration;
            let batch = DataBatch::sample(&mut rng, setup.model.train_set().len(), setup.optimizer.batch_size);
            let lr = setup.optimizer.lr_at(k);
            let grad = compute_gradient(&setup.model, &self.state.params, &batch)
                .map_err(|e| Fail::from(e.at_iteration(k)))?;
            self.state.params = sgd_step(&self.state.params, &grad, lr).map_err(Fail::from)?;
            self.state.ops.push(LocalOp::Step {
                iteration: k,
                indices: batch.sample_indices,
                lr,
            });
            self.state.iteration += 1;
            if (k + 1).is_multiple_of(setup.section_length) {
                self.sync(round, mode)?;
                round += 1;
            }
            if self.id == 0 && self.state.iteration.is_multiple_of(setup.eval_every) {
                self.evaluate()?;
            }
        }
        if let Some(tx) = &self.to_coord {
            tx.send(ToCoordinator::Done { worker: self.id })
                .map_err(|_| Fail::Abort(format!("worker {}: coordinator channel closed", self.id)))?;
            loop {
                match self.recv_grant()? {
                    ToWorker::Shutdown => break,
                    grant => {
                        self.execute_grant(grant)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn sync(&mut self, round: u64, mode: Option<GgMode>) -> Result<(), Fail> {
        let n = self.setup.workers();
        match (self.setup.algorithm, mode) {
            (_, Some(mode)) => {
                let tx = self.to_coord.as_ref().expect("coordinator algorithm");
                tx.send(ToCoordinator::SyncRequest { worker: self.id })
                    .map_err(|_| Fail::Abort(format!("worker {}: coordinator channel closed", self.id)))?;
                loop {
                    let msg = self.recv_grant()?;
                    if msg == ToWorker::Shutdown {
                        return Err(Fail::Abort(format!(
                            "worker {}: shut down while waiting for a group",
                            self.id
                        )));
                    }
                    if self.execute_grant(msg)? || mode == GgMode::Smart {
                        return Ok(());
                    }
                }
            }
            (AlgorithmKind::PreduceStatic, None) => {
                let rule = self.setup.schedule.as_ref().expect("validated");
                match rule.schedule_group(self.id, round) {
                    Assignment::Skip => Ok(()),
                    Assignment::Group(g) => self.collective(&g, round),
                }
            }
            (_, None) => {
                let all = GroupSpec::new((0..n).collect(), n).expect("valid group");
                self.collective(&all, round)
            }
        }
    }

    /// Run a granted group and acknowledge it; true if it answered this
    /// worker's own request.
    fn execute_grant(&mut self, msg: ToWorker) -> Result<bool, Fail> {
        let ToWorker::GroupGrant {
            seq,
            members,
            serves_request,
        } = msg
        else {
            return Err(Fail::Abort(format!("worker {}: unexpected shutdown", self.id)));
        };
        let g = GroupSpec::new(members, self.setup.workers()).map_err(|e| Fail::Error(e.into()))?;
        self.collective(&g, seq)?;
        self.to_coord
            .as_ref()
            .expect("coordinator algorithm")
            .send(ToCoordinator::Ack { worker: self.id, seq })
            .map_err(|_| Fail::Abort(format!("worker {}: coordinator channel closed", self.id)))?;
        Ok(serves_request)
    }

    fn collective(&mut self, g: &GroupSpec, key: u64) -> Result<(), Fail> {
        if g.len() < 2 {
            return Ok(());
        }
        self.state.params = preduce(&mut self.link, g, key, &self.state.params, Some(self.options.timeout))
            .map_err(|e| Fail::Abort(e.to_string()))?;
        self.state.ops.push(LocalOp::Average {
            key,
            members: g.members().to_vec(),
        });
        Ok(())
    }

    fn recv_grant(&mut self) -> Result<ToWorker, Fail> {
        let rx = self.from_coord.as_ref().expect("coordinator algorithm");
        rx.recv_timeout(self.options.timeout).map_err(|e| {
            Fail::Abort(match e {
                RecvTimeoutError::Timeout => format!("worker {}: timed out waiting for the coordinator", self.id),
                RecvTimeoutError::Disconnected => format!("worker {}: coordinator channel closed", self.id),
            })
        })
    }

    fn try_recv_grant(&mut self) -> Result<Option<ToWorker>, Fail> {
        let rx = self.from_coord.as_ref().expect("coordinator algorithm");
        match rx.try_recv() {
            Ok(m) => Ok(Some(m)),
            Err(crossbeam_channel::TryRecvError::Empty) => Ok(None),
            Err(crossbeam_channel::TryRecvError::Disconnected) => {
                Err(Fail::Abort(format!("worker {}: coordinator channel closed", self.id)))
            }
        }
    }

    fn evaluate(&mut self) -> Result<(), Fail> {
        let k = self.state.iteration;
        let loss = evaluate_loss(&self.setup.model, &self.state.params, &self.setup.eval_set)
            .map_err(|e| Fail::from(e.at_iteration(k)))?;
        self.state.trajectory.push(TrajectoryRow {
            worker: self.id,
            iteration: k,
            virtual_time: self.start.elapsed().as_secs_f64(),
            loss,
            event_kind: "eval".into(),
        });
        Ok(())
    }
}

enum Fail {
    Abort(String),
    Error(TrainError),
}

impl From<crate::model::ModelError> for Fail {
    fn from(e: crate::model::ModelError) -> Self {
        Fail::Error(e.into())
    }
}

/// Interleave per-worker histories into one serial history: each average
/// is emitted once, when it is next in line for all of its members.
fn merge_logs(logs: &[Vec<LocalOp>]) -> Result<Vec<ReplayOp>, TrainError> {
    let mut next = vec![0usize; logs.len()];
    let mut out = Vec::new();
    loop {
        let mut progressed = false;
        for w in 0..logs.len() {
            while let Some(LocalOp::Step { iteration, indices, lr }) = logs[w].get(next[w]) {
                out.push(ReplayOp::Step {
                    worker: w,
                    iteration: *iteration,
                    indices: indices.clone(),
                    lr: *lr,
                });
                next[w] += 1;
                progressed = true;
            }
            if let Some(op @ LocalOp::Average { members, .. }) = logs[w].get(next[w]) {
                if members.iter().all(|&m| logs[m].get(next[m]) == Some(op)) {
                    out.push(ReplayOp::Average {
                        members: members.clone(),
                    });
                    for &m in members {
                        next[m] += 1;
                    }
                    progressed = true;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    if let Some(w) = (0..logs.len()).find(|&w| next[w] < logs[w].len()) {
        return Err(TrainError::Replay(format!(
            "worker {w} is stuck at entry {} of its history",
            next[w]
        )));
    }
    Ok(out)
}

//! The training loop driven by the discrete-event simulator.

use std::collections::{BTreeMap, VecDeque};

use rand_chacha::ChaCha8Rng;

use super::{
    run_cooldown, worker_rng, AlgorithmKind, ReplayLog, ReplayOp, RunOutput, RunStatus, ThresholdHit, TrainError,
    TrainSetup, TrajectoryRow, WaitEdge,
};
use crate::collective::{preduce_lockstep, CacheOutcome, CommunicatorCache};
use crate::coordinator::{CoordEvent, Coordinator, GgMode, ToCoordinator, ToWorker};
use crate::gossip::GroupSpec;
use crate::model::{compute_gradient, evaluate_loss, sgd_step, DataBatch, ParamVector};
use crate::schedule::Assignment;
use crate::sim::{EventKind, EventQueue, Trace};
use crate::transport::SimNetwork;

enum Ev {
    ComputeDone(usize),
    ToCoord(ToCoordinator),
    ToWorker(usize, ToWorker),
    CollectiveDone(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activity {
    Idle,
    Computing,
    Arrived(u64),
    InCollective(u64),
    Stopped,
}

struct Grant {
    seq: u64,
    members: Vec<usize>,
    serves_request: bool,
}

struct Worker {
    params: ParamVector,
    iteration: u64,
    rounds: u64,
    rng: ChaCha8Rng,
    activity: Activity,
    at_sync_point: bool,
    done: bool,
    inbox: VecDeque<Grant>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CollectiveKind {
    Ring,
    Server,
}

struct Collective {
    members: Vec<usize>,
    arrived: Vec<bool>,
    own: Vec<bool>,
    kind: CollectiveKind,
}

struct Sim<'a> {
    setup: &'a TrainSetup,
    n: usize,
    queue: EventQueue<Ev>,
    workers: Vec<Worker>,
    coord: Option<Coordinator>,
    mode: Option<GgMode>,
    trace: Trace,
    ops: Vec<ReplayOp>,
    trajectory: Vec<TrajectoryRow>,
    collectives: BTreeMap<u64, Collective>,
    round_ids: BTreeMap<(u64, Vec<usize>), u64>,
    next_collective: u64,
    completed: u64,
    net: SimNetwork,
    cache: CommunicatorCache,
    stop: Option<RunStatus>,
    threshold: Option<ThresholdHit>,
}

/// Run `setup` in virtual time. Deterministic in `setup` (including its seed).
pub fn run_simulated(setup: &TrainSetup) -> Result<RunOutput, TrainError> {
    setup.validate()?;
    let n = setup.workers();
    let coord = match setup.gg_policy() {
        Some(p) => Some(Coordinator::new(n, p)?),
        None => None,
    };
    let sim = Sim {
        setup,
        n,
        queue: EventQueue::new(),
        workers: (0..n)
            .map(|w| Worker {
                params: setup.init.clone(),
                iteration: 0,
                rounds: 0,
                rng: worker_rng(setup.seed, w),
                activity: Activity::Idle,
                at_sync_point: false,
                done: false,
                inbox: VecDeque::new(),
            })
            .collect(),
        mode: coord.as_ref().map(|c| c.policy().mode),
        coord,
        trace: Trace::new(setup.record_trace),
        ops: Vec::new(),
        trajectory: Vec::new(),
        collectives: BTreeMap::new(),
        round_ids: BTreeMap::new(),
        next_collective: 0,
        completed: 0,
        net: SimNetwork::new(n),
        cache: CommunicatorCache::new(setup.cache_capacity),
        stop: None,
        threshold: None,
    };
    sim.run()
}

impl Sim<'_> {
    fn now(&self) -> f64 {
        self.queue.now()
    }

    fn run(mut self) -> Result<RunOutput, TrainError> {
        self.evaluate()?;
        for w in 0..self.n {
            self.pump(w)?;
        }
        let time_cap = self.setup.termination.time_cap;
        let mut end_time = 0.0;
        while self.stop.is_none() {
            let Some((t, ev)) = self.queue.advance_clock() else {
                break;
            };
            if let Some(cap) = time_cap.filter(|&cap| t > cap) {
                self.stop = Some(RunStatus::TimeCap);
                end_time = cap;
                break;
            }
            end_time = t;
            self.handle(ev)?;
        }
        let status = match self.stop.take() {
            Some(s) => s,
            None if self.workers.iter().all(|w| w.activity == Activity::Stopped) => RunStatus::Completed,
            None => RunStatus::Deadlock {
                waits: self.wait_for_graph(),
            },
        };
        self.trace.record(
            end_time,
            None,
            EventKind::RunEnd {
                status: status.name().into(),
            },
        );
        self.finish(status, end_time)
    }

    fn finish(mut self, status: RunStatus, end_time: f64) -> Result<RunOutput, TrainError> {
        let setup = self.setup;
        let params: Vec<ParamVector> = self.workers.iter().map(|w| w.params.clone()).collect();
        for (w, p) in params.iter().enumerate() {
            let loss = evaluate_loss(&setup.model, p, &setup.eval_set)?;
            self.trajectory.push(TrajectoryRow {
                worker: w,
                iteration: self.workers[w].iteration,
                virtual_time: end_time,
                loss,
                event_kind: "final".into(),
            });
        }
        let cooldown_start = self.ops.len();
        let mut final_params = params.clone();
        if !matches!(status, RunStatus::Deadlock { .. }) {
            run_cooldown(setup, &mut final_params, &mut self.ops);
            if setup.cooldown_rounds > 0 {
                for (w, p) in final_params.iter().enumerate() {
                    let loss = evaluate_loss(&setup.model, p, &setup.eval_set)?;
                    self.trajectory.push(TrajectoryRow {
                        worker: w,
                        iteration: self.workers[w].iteration,
                        virtual_time: end_time,
                        loss,
                        event_kind: "cooldown".into(),
                    });
                }
            }
        }
        Ok(RunOutput {
            status,
            params,
            final_params,
            iterations: self.workers.iter().map(|w| w.iteration).collect(),
            trajectory: self.trajectory,
            trace: self.trace.into_events(),
            replay: ReplayLog {
                workers: self.n,
                init: setup.init.clone(),
                ops: self.ops,
                cooldown_start,
            },
            stats: self.coord.as_ref().map(Coordinator::stats),
            threshold: self.threshold,
            end_time,
            collectives: self.completed,
        })
    }

    fn handle(&mut self, ev: Ev) -> Result<(), TrainError> {
        match ev {
            Ev::ComputeDone(w) => self.compute_done(w),
            Ev::ToCoord(msg) => self.coordinator_receive(msg),
            Ev::ToWorker(
                w,
                ToWorker::GroupGrant {
                    seq,
                    members,
                    serves_request,
                },
            ) => {
                self.trace.record(
                    self.now(),
                    Some(w),
                    EventKind::GgGrant {
                        group: seq,
                        members: members.clone(),
                    },
                );
                self.workers[w].inbox.push_back(Grant {
                    seq,
                    members,
                    serves_request,
                });
                self.pump(w)
            }
            Ev::ToWorker(w, ToWorker::Shutdown) => {
                self.workers[w].activity = Activity::Stopped;
                Ok(())
            }
            Ev::CollectiveDone(id) => self.collective_done(id),
        }
    }

    fn send_to_coordinator(&mut self, msg: ToCoordinator) {
        let t = self.now() + self.setup.profile.coordinator_latency;
        self.queue.schedule(t, Ev::ToCoord(msg));
    }

    fn coordinator_receive(&mut self, msg: ToCoordinator) -> Result<(), TrainError> {
        let now = self.now();
        let coord = self.coord.as_mut().expect("coordinator algorithm");
        let decision = coord.handle(&msg)?;
        for e in decision.events {
            let (worker, kind) = match e {
                CoordEvent::Request { worker } => (Some(worker), EventKind::GgRequest),
                CoordEvent::Division { groups } => (None, EventKind::Division { groups }),
                CoordEvent::GbPush { worker, seq } => (Some(worker), EventKind::GbPush { group: seq }),
                CoordEvent::Queued { seq, members } => (None, EventKind::Queued { group: seq, members }),
                CoordEvent::LockAcquire { seq, members } => (None, EventKind::LockAcquire { group: seq, members }),
                CoordEvent::LockRelease { seq, members } => (None, EventKind::LockRelease { group: seq, members }),
            };
            self.trace.record(now, worker, kind);
        }
        let t = now + self.setup.profile.coordinator_latency;
        for (w, m) in decision.outbound {
            self.queue.schedule(t, Ev::ToWorker(w, m));
        }
        Ok(())
    }

    /// Let an idle worker make progress: join a collective it may execute
    /// now, keep waiting, or start computing.
    fn pump(&mut self, w: usize) -> Result<(), TrainError> {
        let worker = &self.workers[w];
        if worker.activity != Activity::Idle {
            return Ok(());
        }
        let executable = match self.mode {
            Some(GgMode::Random) => !worker.inbox.is_empty(),
            Some(GgMode::Smart) => !worker.inbox.is_empty() && (worker.at_sync_point || worker.done),
            None => false,
        };
        if executable {
            let worker = &mut self.workers[w];
            let g = worker.inbox.pop_front().expect("non-empty");
            let own = match self.mode {
                Some(GgMode::Random) => g.serves_request,
                _ => worker.at_sync_point,
            };
            return self.arrive(w, g.seq, g.members, own, CollectiveKind::Ring);
        }
        if worker.at_sync_point || worker.done {
            return Ok(());
        }
        self.start_compute(w);
        Ok(())
    }

    fn start_compute(&mut self, w: usize) {
        let now = self.now();
        let worker = &mut self.workers[w];
        if worker.iteration >= self.setup.termination.max_iterations {
            if self.coord.is_some() {
                worker.done = true;
                self.send_to_coordinator(ToCoordinator::Done { worker: w });
            } else {
                worker.activity = Activity::Stopped;
            }
            return;
        }
        worker.activity = Activity::Computing;
        let k = worker.iteration;
        self.trace
            .record(now, Some(w), EventKind::ComputeStart { iteration: k });
        let t = now + self.setup.profile.compute_time(w);
        self.queue.schedule(t, Ev::ComputeDone(w));
    }

    fn compute_done(&mut self, w: usize) -> Result<(), TrainError> {
        let setup = self.setup;
        let worker = &mut self.workers[w];
        let k = worker.iteration;
        let batch = DataBatch::sample(
            &mut worker.rng,
            setup.model.train_set().len(),
            setup.optimizer.batch_size,
        );
        let lr = setup.optimizer.lr_at(k);
        let grad = compute_gradient(&setup.model, &worker.params, &batch).map_err(|e| e.at_iteration(k))?;
        worker.params = sgd_step(&worker.params, &grad, lr)?;
        if !worker.params.is_finite() {
            return Err(crate::model::ModelError::NonFiniteLoss {
                iteration: Some(k),
                params_norm: worker.params.norm(),
            }
            .into());
        }
        worker.iteration += 1;
        worker.activity = Activity::Idle;
        self.ops.push(ReplayOp::Step {
            worker: w,
            iteration: k,
            indices: batch.sample_indices,
            lr,
        });
        self.trace
            .record(self.now(), Some(w), EventKind::ComputeEnd { iteration: k });
        if (k + 1).is_multiple_of(setup.section_length) {
            self.begin_sync(w)
        } else {
            self.after_iteration(w)
        }
    }

    fn begin_sync(&mut self, w: usize) -> Result<(), TrainError> {
        let round = self.workers[w].rounds;
        self.workers[w].rounds += 1;
        match self.setup.algorithm {
            a if a.uses_coordinator() => {
                self.workers[w].at_sync_point = true;
                self.send_to_coordinator(ToCoordinator::SyncRequest { worker: w });
                self.pump(w)
            }
            AlgorithmKind::PreduceStatic => {
                let rule = self.setup.schedule.as_ref().expect("validated");
                match rule.schedule_group(w, round) {
                    Assignment::Skip => {
                        self.trace.record(self.now(), Some(w), EventKind::Skip { round });
                        self.after_iteration(w)
                    }
                    Assignment::Group(g) => {
                        let id = self.round_collective(round, g.members());
                        self.arrive(w, id, g.members().to_vec(), true, CollectiveKind::Ring)
                    }
                }
            }
            a => {
                let all: Vec<usize> = (0..self.n).collect();
                let id = self.round_collective(round, &all);
                let kind = if a == AlgorithmKind::CentralizedPs {
                    CollectiveKind::Server
                } else {
                    CollectiveKind::Ring
                };
                self.arrive(w, id, all, true, kind)
            }
        }
    }

    fn round_collective(&mut self, round: u64, members: &[usize]) -> u64 {
        let key = (round, members.to_vec());
        if let Some(&id) = self.round_ids.get(&key) {
            return id;
        }
        let id = self.next_collective;
        self.next_collective += 1;
        self.round_ids.insert(key, id);
        id
    }

    fn arrive(
        &mut self,
        w: usize,
        id: u64,
        members: Vec<usize>,
        own: bool,
        kind: CollectiveKind,
    ) -> Result<(), TrainError> {
        let c = self.collectives.entry(id).or_insert_with(|| Collective {
            arrived: vec![false; members.len()],
            own: vec![false; members.len()],
            members,
            kind,
        });
        let pos = c.members.iter().position(|&m| m == w).expect("worker is a member");
        c.arrived[pos] = true;
        c.own[pos] = own;
        self.workers[w].activity = Activity::Arrived(id);
        if c.arrived.iter().all(|&a| a) {
            self.start_collective(id)?;
        }
        Ok(())
    }

    fn start_collective(&mut self, id: u64) -> Result<(), TrainError> {
        let now = self.now();
        let setup = self.setup;
        let c = &self.collectives[&id];
        let members = c.members.clone();
        let group = GroupSpec::new(members.clone(), self.n).expect("valid members");
        let len = setup.init.len();
        let inputs: Vec<&ParamVector> = members.iter().map(|&m| &self.workers[m].params).collect();
        let (outputs, cost) = match c.kind {
            CollectiveKind::Ring => {
                let outputs = preduce_lockstep(&mut self.net, &group, id, &inputs)?;
                let mut cost = setup.profile.preduce_cost(&setup.nodes, &group, len);
                if group.len() > 1 && self.cache.get(&group).1 != CacheOutcome::Hit {
                    cost += setup.profile.communicator_setup;
                }
                (outputs, cost)
            }
            CollectiveKind::Server => {
                let mut mean = vec![0.0; len];
                for x in &inputs {
                    for (acc, v) in mean.iter_mut().zip(x.iter()) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= members.len() as f64);
                let mean = ParamVector::new(mean);
                (
                    vec![mean; members.len()],
                    setup.profile.ps_round_cost(&setup.nodes, len),
                )
            }
        };
        for (&m, out) in members.iter().zip(outputs) {
            self.workers[m].params = out;
            self.workers[m].activity = Activity::InCollective(id);
            self.trace.record(
                now,
                Some(m),
                EventKind::PreduceStart {
                    group: id,
                    members: members.clone(),
                },
            );
        }
        if members.len() > 1 {
            self.ops.push(ReplayOp::Average {
                members: members.clone(),
            });
        }
        self.queue.schedule(now + cost, Ev::CollectiveDone(id));
        Ok(())
    }

    fn collective_done(&mut self, id: u64) -> Result<(), TrainError> {
        let now = self.now();
        let c = self.collectives.remove(&id).expect("live collective");
        self.completed += 1;
        for &m in &c.members {
            self.trace.record(
                now,
                Some(m),
                EventKind::PreduceEnd {
                    group: id,
                    members: c.members.clone(),
                },
            );
            self.workers[m].activity = Activity::Idle;
            if self.coord.is_some() {
                self.send_to_coordinator(ToCoordinator::Ack { worker: m, seq: id });
            }
        }
        for (&m, &own) in c.members.iter().zip(&c.own) {
            if self.stop.is_some() {
                break;
            }
            if own {
                self.workers[m].at_sync_point = false;
                self.after_iteration(m)?;
            } else {
                self.pump(m)?;
            }
        }
        Ok(())
    }

    fn after_iteration(&mut self, w: usize) -> Result<(), TrainError> {
        if w == 0 && self.workers[0].iteration.is_multiple_of(self.setup.eval_every) {
            self.evaluate()?;
            if self.stop.is_some() {
                return Ok(());
            }
        }
        self.pump(w)
    }

    /// Evaluate worker 0 on the held-out set and check the loss threshold.
    fn evaluate(&mut self) -> Result<(), TrainError> {
        let now = self.now();
        let k = self.workers[0].iteration;
        let loss = evaluate_loss(&self.setup.model, &self.workers[0].params, &self.setup.eval_set)
            .map_err(|e| e.at_iteration(k))?;
        self.trace.record(now, Some(0), EventKind::Eval { iteration: k, loss });
        self.trajectory.push(TrajectoryRow {
            worker: 0,
            iteration: k,
            virtual_time: now,
            loss,
            event_kind: "eval".into(),
        });
        if let Some(threshold) = self.setup.termination.loss_threshold {
            if loss <= threshold && self.threshold.is_none() {
                self.threshold = Some(ThresholdHit {
                    iteration: k,
                    time: now,
                    loss,
                });
                self.stop = Some(RunStatus::ThresholdReached);
            }
        }
        Ok(())
    }

    fn wait_for_graph(&self) -> Vec<WaitEdge> {
        let mut edges = Vec::new();
        for (w, worker) in self.workers.iter().enumerate() {
            let edge = match worker.activity {
                Activity::Stopped => continue,
                Activity::Arrived(id) => {
                    let c = &self.collectives[&id];
                    WaitEdge {
                        worker: w,
                        state: format!("waiting in collective {id}"),
                        waiting_for: c
                            .members
                            .iter()
                            .zip(&c.arrived)
                            .filter(|(_, &a)| !a)
                            .map(|(&m, _)| m)
                            .collect(),
                    }
                }
                _ if worker.at_sync_point => WaitEdge {
                    worker: w,
                    state: "waiting for a group grant".into(),
                    waiting_for: self
                        .coord
                        .as_ref()
                        .map(|c| (0..self.n).filter(|&m| m != w && c.locks().is_set(m)).collect())
                        .unwrap_or_default(),
                },
                _ => WaitEdge {
                    worker: w,
                    state: if worker.done {
                        "draining, waiting for shutdown".into()
                    } else {
                        "idle".into()
                    },
                    waiting_for: Vec::new(),
                },
            };
            edges.push(edge);
        }
        edges
    }
}

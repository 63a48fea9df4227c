//! The group generator: a single serial decision loop that hands out
//! synchronization groups and serializes conflicting ones.
//!
//! Every group passes through the same life cycle:
//!
//! 1. generated (random draw, or a division of the idle workers) and queued
//!    in the pending FIFO;
//! 2. granted once every member's lock bit is clear: all member bits are set
//!    in the same decision and each member receives a [`ToWorker::GroupGrant`];
//! 3. released after the last member acknowledges, which re-scans the
//!    pending FIFO.
//!
//! In smart mode each worker also owns a group buffer of generated groups not
//! yet claimed by one of its requests, and a group is only granted when it is
//! the oldest ungranted group of every member, so all members execute their
//! groups in buffer order.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::{index, SliceRandom};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gossip::GroupSpec;
use crate::topology::NodeMap;

pub type GroupSeq = u64;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("unknown worker id {0}")]
    UnknownWorker(usize),
    #[error("worker {worker} requested a group while its request for group {outstanding} is unacknowledged")]
    RequestOutstanding { worker: usize, outstanding: GroupSeq },
    #[error("worker {0} requested a group after reporting done")]
    RequestAfterDone(usize),
    #[error("worker {worker} acknowledged unknown group {seq}")]
    UnknownGroup { worker: usize, seq: GroupSeq },
    #[error("worker {worker} is not a member of group {seq}")]
    NotMember { worker: usize, seq: GroupSeq },
    #[error("worker {worker} acknowledged group {seq} before it was granted")]
    NotGranted { worker: usize, seq: GroupSeq },
    #[error("worker {worker} acknowledged group {seq} twice")]
    DuplicateAck { worker: usize, seq: GroupSeq },
    #[error("worker {worker} reported done with group {seq} unacknowledged")]
    DoneWithOutstanding { worker: usize, seq: GroupSeq },
    #[error("invalid policy: {0}")]
    Policy(String),
}

/// Worker → coordinator messages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ToCoordinator {
    SyncRequest { worker: usize },
    Ack { worker: usize, seq: GroupSeq },
    Done { worker: usize },
}

/// Coordinator → worker messages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ToWorker {
    GroupGrant {
        seq: GroupSeq,
        members: Vec<usize>,
        /// Whether completing this group answers the recipient's pending
        /// sync request (as opposed to joining someone else's group).
        serves_request: bool,
    },
    Shutdown,
}

impl ToCoordinator {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("message serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

impl ToWorker {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("message serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GgMode {
    Random,
    Smart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GgPolicy {
    pub mode: GgMode,
    pub group_size: usize,
    /// `None` disables the slowdown filter.
    pub c_thres: Option<u64>,
    /// Enables inter/intra divisions in smart mode.
    pub node_map: Option<NodeMap>,
    pub seed: u64,
}

impl GgPolicy {
    pub fn random(group_size: usize, seed: u64) -> Self {
        GgPolicy {
            mode: GgMode::Random,
            group_size,
            c_thres: None,
            node_map: None,
            seed,
        }
    }

    pub fn smart(group_size: usize, c_thres: Option<u64>, node_map: Option<NodeMap>, seed: u64) -> Self {
        GgPolicy {
            mode: GgMode::Smart,
            group_size,
            c_thres,
            node_map,
            seed,
        }
    }
}

/// One bit per worker: set while the worker belongs to a granted group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LockVector(Vec<bool>);

impl LockVector {
    pub fn new(n: usize) -> Self {
        LockVector(vec![false; n])
    }

    pub fn is_set(&self, worker: usize) -> bool {
        self.0[worker]
    }

    pub fn all_clear(&self, members: &[usize]) -> bool {
        members.iter().all(|&w| !self.0[w])
    }

    fn set_all(&mut self, members: &[usize]) {
        for &w in members {
            debug_assert!(!self.0[w], "lock bit {w} already set");
            self.0[w] = true;
        }
    }

    fn clear_all(&mut self, members: &[usize]) {
        for &w in members {
            self.0[w] = false;
        }
    }

    pub fn count_set(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Draw a group of `k` workers containing `initiator`, the other members
/// uniformly without replacement.
pub fn generate_random_group(rng: &mut ChaCha8Rng, n: usize, k: usize, initiator: usize) -> GroupSpec {
    assert!(
        initiator < n && (1..=n).contains(&k),
        "k={k} initiator={initiator} n={n}"
    );
    let mut members = Vec::with_capacity(k);
    members.push(initiator);
    for i in index::sample(rng, n - 1, k - 1) {
        members.push(if i < initiator { i } else { i + 1 });
    }
    GroupSpec::new(members, n).expect("distinct in-range members")
}

/// Randomly partition `idle ∪ {initiator}` into disjoint groups of `k`
/// (the last one possibly smaller). The initiator's group comes first.
pub fn global_division(rng: &mut ChaCha8Rng, n: usize, k: usize, initiator: usize, idle: &[usize]) -> Vec<GroupSpec> {
    let mut others: Vec<usize> = idle.iter().copied().filter(|&w| w != initiator).collect();
    others.sort_unstable();
    others.dedup();
    others.shuffle(rng);
    let mut order = Vec::with_capacity(others.len() + 1);
    order.push(initiator);
    order.extend(others);
    order
        .chunks(k.max(1))
        .map(|c| GroupSpec::new(c.to_vec(), n).expect("distinct in-range members"))
        .collect()
}

/// Groups produced by one inter/intra division.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterIntraRounds {
    pub heads: Vec<usize>,
    /// Heads grouped across nodes, plus node-local groups of the others.
    pub inter: Vec<GroupSpec>,
    /// One group per node holding all of its participating workers.
    pub intra: Vec<GroupSpec>,
}

/// Two-round division of `idle` (with `initiator` always included): one head
/// per node taken round-robin by `rotation[node]`, heads randomly grouped by
/// `k` across nodes, non-heads randomly grouped by `k` within their node;
/// then whole-node groups.
pub fn inter_intra_division(
    rng: &mut ChaCha8Rng,
    k: usize,
    nodes: &NodeMap,
    initiator: usize,
    idle: &[usize],
    rotation: &[usize],
) -> InterIntraRounds {
    let n = nodes.workers();
    let k = k.max(1);
    let mut per_node: Vec<Vec<usize>> = vec![Vec::new(); nodes.nodes()];
    for &w in idle.iter().chain(std::iter::once(&initiator)) {
        per_node[nodes.node_of(w)].push(w);
    }
    let mut heads = Vec::new();
    let mut locals: Vec<Vec<usize>> = Vec::new();
    for (node, ws) in per_node.iter_mut().enumerate() {
        ws.sort_unstable();
        ws.dedup();
        if ws.is_empty() {
            locals.push(Vec::new());
            continue;
        }
        let head = ws[rotation.get(node).copied().unwrap_or(0) % ws.len()];
        heads.push(head);
        locals.push(ws.iter().copied().filter(|&w| w != head).collect());
    }
    let group = |c: &[usize]| GroupSpec::new(c.to_vec(), n).expect("distinct in-range members");
    let mut shuffled_heads = heads.clone();
    shuffled_heads.shuffle(rng);
    let mut inter: Vec<GroupSpec> = shuffled_heads.chunks(k).map(group).collect();
    for mut local in locals {
        local.shuffle(rng);
        inter.extend(local.chunks(k).map(group));
    }
    // The initiator's inter group goes first so it is served immediately.
    if let Some(pos) = inter.iter().position(|g| g.contains(initiator)) {
        let g = inter.remove(pos);
        inter.insert(0, g);
    }
    let mut intra: Vec<GroupSpec> = per_node
        .iter()
        .filter(|ws| !ws.is_empty())
        .map(|ws| group(ws))
        .collect();
    if let Some(pos) = intra.iter().position(|g| g.contains(initiator)) {
        let g = intra.remove(pos);
        intra.insert(0, g);
    }
    InterIntraRounds { heads, inter, intra }
}

/// Keep worker `w` iff `c_initiator − c_w < c_thres`; the initiator is
/// always kept, and `None` disables filtering.
pub fn slowdown_filter(counters: &[u64], initiator: usize, idle: &[usize], c_thres: Option<u64>) -> Vec<usize> {
    let Some(thres) = c_thres else {
        return idle.to_vec();
    };
    let ci = counters[initiator] as i128;
    idle.iter()
        .copied()
        .filter(|&w| w == initiator || ci - (counters[w] as i128) < thres as i128)
        .collect()
}

/// Decisions worth recording in a run trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CoordEvent {
    Request { worker: usize },
    Division { groups: Vec<Vec<usize>> },
    GbPush { worker: usize, seq: GroupSeq },
    Queued { seq: GroupSeq, members: Vec<usize> },
    LockAcquire { seq: GroupSeq, members: Vec<usize> },
    LockRelease { seq: GroupSeq, members: Vec<usize> },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decision {
    pub outbound: Vec<(usize, ToWorker)>,
    pub events: Vec<CoordEvent>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinatorStats {
    pub grants: u64,
    pub conflicts_queued: u64,
    pub max_queue_len: usize,
    pub counters: Vec<u64>,
    pub divisions: u64,
    pub generated: u64,
}

impl CoordinatorStats {
    /// Groups that had to wait in the pending queue, per granted group.
    pub fn conflict_rate(&self) -> f64 {
        if self.grants == 0 {
            0.0
        } else {
            self.conflicts_queued as f64 / self.grants as f64
        }
    }
}

#[derive(Clone, Debug)]
struct LiveGroup {
    spec: GroupSpec,
    initiator: usize,
    granted: bool,
    acked: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Coordinator {
    n: usize,
    policy: GgPolicy,
    rng: ChaCha8Rng,
    locks: LockVector,
    groups: BTreeMap<GroupSeq, LiveGroup>,
    pending: VecDeque<GroupSeq>,
    ungranted: Vec<VecDeque<GroupSeq>>,
    buffers: Vec<VecDeque<GroupSeq>>,
    outstanding: Vec<Option<GroupSeq>>,
    counters: Vec<u64>,
    done: Vec<bool>,
    live: Vec<usize>,
    rotation: Vec<usize>,
    next_seq: GroupSeq,
    stats: CoordinatorStats,
    shutdown_sent: bool,
}

impl Coordinator {
    pub fn new(n: usize, policy: GgPolicy) -> Result<Self, ProtocolError> {
        if n == 0 {
            return Err(ProtocolError::Policy("no workers".into()));
        }
        if !(1..=n).contains(&policy.group_size) {
            return Err(ProtocolError::Policy(format!(
                "group size {} outside 1..={n}",
                policy.group_size
            )));
        }
        if let Some(map) = &policy.node_map {
            if map.workers() != n {
                return Err(ProtocolError::Policy(format!(
                    "node map covers {} workers, expected {n}",
                    map.workers()
                )));
            }
        }
        let nodes = policy.node_map.as_ref().map_or(0, |m| m.nodes());
        Ok(Coordinator {
            n,
            rng: ChaCha8Rng::seed_from_u64(policy.seed),
            policy,
            locks: LockVector::new(n),
            groups: BTreeMap::new(),
            pending: VecDeque::new(),
            ungranted: vec![VecDeque::new(); n],
            buffers: vec![VecDeque::new(); n],
            outstanding: vec![None; n],
            counters: vec![0; n],
            done: vec![false; n],
            live: vec![0; n],
            rotation: vec![0; nodes],
            next_seq: 0,
            stats: CoordinatorStats {
                counters: vec![0; n],
                ..Default::default()
            },
            shutdown_sent: false,
        })
    }

    pub fn policy(&self) -> &GgPolicy {
        &self.policy
    }

    pub fn locks(&self) -> &LockVector {
        &self.locks
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn live_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn buffer(&self, worker: usize) -> Vec<GroupSeq> {
        self.buffers[worker].iter().copied().collect()
    }

    pub fn members_of(&self, seq: GroupSeq) -> Option<&[usize]> {
        self.groups.get(&seq).map(|g| g.spec.members())
    }

    pub fn stats(&self) -> CoordinatorStats {
        let mut s = self.stats.clone();
        s.counters = self.counters.clone();
        s
    }

    pub fn handle(&mut self, msg: &ToCoordinator) -> Result<Decision, ProtocolError> {
        let mut d = Decision::default();
        let first_new = self.next_seq;
        match *msg {
            ToCoordinator::SyncRequest { worker } => self.handle_sync_request(worker, &mut d)?,
            ToCoordinator::Ack { worker, seq } => self.handle_ack(worker, seq, &mut d)?,
            ToCoordinator::Done { worker } => self.handle_done(worker)?,
        }
        self.try_grant(&mut d);
        self.record_queued(first_new, &mut d);
        self.maybe_shutdown(&mut d);
        Ok(d)
    }

    /// Random-mode request whose group was chosen by the caller rather than
    /// drawn by the coordinator.
    pub fn handle_sync_request_with(&mut self, worker: usize, group: GroupSpec) -> Result<Decision, ProtocolError> {
        self.check_worker(worker)?;
        if self.policy.mode != GgMode::Random {
            return Err(ProtocolError::Policy("caller-chosen groups need random mode".into()));
        }
        if !group.contains(worker) || group.members().iter().any(|&m| m >= self.n) {
            return Err(ProtocolError::NotMember {
                worker,
                seq: self.next_seq,
            });
        }
        if self.done[worker] {
            return Err(ProtocolError::RequestAfterDone(worker));
        }
        if let Some(outstanding) = self.outstanding[worker] {
            return Err(ProtocolError::RequestOutstanding { worker, outstanding });
        }
        let mut d = Decision::default();
        let first_new = self.next_seq;
        self.counters[worker] += 1;
        d.events.push(CoordEvent::Request { worker });
        let seq = self.register(group, worker);
        self.outstanding[worker] = Some(seq);
        self.try_grant(&mut d);
        self.record_queued(first_new, &mut d);
        Ok(d)
    }

    fn check_worker(&self, worker: usize) -> Result<(), ProtocolError> {
        if worker >= self.n {
            Err(ProtocolError::UnknownWorker(worker))
        } else {
            Ok(())
        }
    }

    fn handle_sync_request(&mut self, worker: usize, d: &mut Decision) -> Result<(), ProtocolError> {
        self.check_worker(worker)?;
        if self.done[worker] {
            return Err(ProtocolError::RequestAfterDone(worker));
        }
        if let Some(outstanding) = self.outstanding[worker] {
            return Err(ProtocolError::RequestOutstanding { worker, outstanding });
        }
        self.counters[worker] += 1;
        d.events.push(CoordEvent::Request { worker });
        let served = match self.policy.mode {
            GgMode::Random => {
                let g = generate_random_group(&mut self.rng, self.n, self.policy.group_size, worker);
                self.register(g, worker)
            }
            GgMode::Smart => {
                if self.buffers[worker].is_empty() {
                    self.divide(worker, d);
                }
                self.buffers[worker].pop_front().expect("division covers the initiator")
            }
        };
        self.outstanding[worker] = Some(served);
        Ok(())
    }

    /// Global division (or inter/intra division) over the idle workers.
    fn divide(&mut self, initiator: usize, d: &mut Decision) {
        let idle: Vec<usize> = (0..self.n)
            .filter(|&w| w == initiator || (self.live[w] == 0 && !self.done[w]))
            .collect();
        let idle = slowdown_filter(&self.counters, initiator, &idle, self.policy.c_thres);
        let groups = match &self.policy.node_map {
            Some(map) => {
                let rounds = inter_intra_division(
                    &mut self.rng,
                    self.policy.group_size,
                    map,
                    initiator,
                    &idle,
                    &self.rotation,
                );
                for &h in &rounds.heads {
                    self.rotation[map.node_of(h)] += 1;
                }
                d.events.push(CoordEvent::Division {
                    groups: rounds.inter.iter().map(|g| g.members().to_vec()).collect(),
                });
                d.events.push(CoordEvent::Division {
                    groups: rounds.intra.iter().map(|g| g.members().to_vec()).collect(),
                });
                let mut all = rounds.inter;
                all.extend(rounds.intra);
                all
            }
            None => {
                let groups = global_division(&mut self.rng, self.n, self.policy.group_size, initiator, &idle);
                d.events.push(CoordEvent::Division {
                    groups: groups.iter().map(|g| g.members().to_vec()).collect(),
                });
                groups
            }
        };
        self.stats.divisions += 1;
        for g in groups {
            let seq = self.register(g.clone(), initiator);
            for &m in g.members() {
                self.buffers[m].push_back(seq);
                d.events.push(CoordEvent::GbPush { worker: m, seq });
            }
        }
    }

    fn register(&mut self, spec: GroupSpec, initiator: usize) -> GroupSeq {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.stats.generated += 1;
        for &m in spec.members() {
            self.live[m] += 1;
            self.ungranted[m].push_back(seq);
        }
        self.groups.insert(
            seq,
            LiveGroup {
                spec,
                initiator,
                granted: false,
                acked: Vec::new(),
            },
        );
        self.pending.push_back(seq);
        seq
    }

    fn handle_ack(&mut self, worker: usize, seq: GroupSeq, d: &mut Decision) -> Result<(), ProtocolError> {
        self.check_worker(worker)?;
        let group = self
            .groups
            .get_mut(&seq)
            .ok_or(ProtocolError::UnknownGroup { worker, seq })?;
        if !group.spec.contains(worker) {
            return Err(ProtocolError::NotMember { worker, seq });
        }
        if !group.granted {
            return Err(ProtocolError::NotGranted { worker, seq });
        }
        if group.acked.contains(&worker) {
            return Err(ProtocolError::DuplicateAck { worker, seq });
        }
        group.acked.push(worker);
        if self.outstanding[worker] == Some(seq) {
            self.outstanding[worker] = None;
        }
        if group.acked.len() == group.spec.len() {
            let group = self.groups.remove(&seq).expect("present");
            let members = group.spec.members().to_vec();
            self.locks.clear_all(&members);
            for &m in &members {
                self.live[m] -= 1;
                self.buffers[m].retain(|&s| s != seq);
            }
            d.events.push(CoordEvent::LockRelease { seq, members });
        }
        Ok(())
    }

    fn handle_done(&mut self, worker: usize) -> Result<(), ProtocolError> {
        self.check_worker(worker)?;
        if let Some(seq) = self.outstanding[worker] {
            return Err(ProtocolError::DoneWithOutstanding { worker, seq });
        }
        self.done[worker] = true;
        Ok(())
    }

    fn grantable(&self, seq: GroupSeq) -> bool {
        let g = &self.groups[&seq];
        let members = g.spec.members();
        if !self.locks.all_clear(members) {
            return false;
        }
        match self.policy.mode {
            GgMode::Random => true,
            GgMode::Smart => members.iter().all(|&m| self.ungranted[m].front() == Some(&seq)),
        }
    }

    /// Scan the pending FIFO and grant every group whose members are free.
    fn try_grant(&mut self, d: &mut Decision) {
        let mut still_pending = VecDeque::with_capacity(self.pending.len());
        let pending = std::mem::take(&mut self.pending);
        for seq in pending {
            if !self.grantable(seq) {
                still_pending.push_back(seq);
                continue;
            }
            let g = self.groups.get_mut(&seq).expect("pending group is live");
            g.granted = true;
            let members = g.spec.members().to_vec();
            let initiator = g.initiator;
            self.locks.set_all(&members);
            for &m in &members {
                let front = self.ungranted[m].iter().position(|&s| s == seq).expect("tracked");
                self.ungranted[m].remove(front);
            }
            self.stats.grants += 1;
            d.events.push(CoordEvent::LockAcquire {
                seq,
                members: members.clone(),
            });
            let smart = self.policy.mode == GgMode::Smart;
            for &m in &members {
                d.outbound.push((
                    m,
                    ToWorker::GroupGrant {
                        seq,
                        members: members.clone(),
                        serves_request: smart || m == initiator,
                    },
                ));
            }
        }
        self.pending = still_pending;
        self.stats.max_queue_len = self.stats.max_queue_len.max(self.pending.len());
    }

    /// Count groups generated since `first_new` that are still blocked.
    fn record_queued(&mut self, first_new: GroupSeq, d: &mut Decision) {
        for &seq in &self.pending {
            if seq >= first_new {
                self.stats.conflicts_queued += 1;
                d.events.push(CoordEvent::Queued {
                    seq,
                    members: self.groups[&seq].spec.members().to_vec(),
                });
            }
        }
    }

    fn maybe_shutdown(&mut self, d: &mut Decision) {
        if !self.shutdown_sent && self.done.iter().all(|&x| x) && self.groups.is_empty() {
            self.shutdown_sent = true;
            for w in 0..self.n {
                d.outbound.push((w, ToWorker::Shutdown));
            }
        }
    }
}

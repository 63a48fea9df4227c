//! Discrete-event machinery: the virtual-time event queue, the cost model
//! for injected heterogeneity, and the JSONL run trace.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::gossip::GroupSpec;
use crate::topology::NodeMap;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("profile field `{field}` must be finite and non-negative, got {value}")]
    InvalidCost { field: &'static str, value: f64 },
    #[error("slowdown for worker {worker} must be finite and at least 1, got {value}")]
    InvalidSlowdown { worker: usize, value: f64 },
    #[error("profile lists {got} slowdowns for {n} workers")]
    SlowdownCount { got: usize, n: usize },
    #[error("trace line {line}: {source}")]
    TraceParse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Virtual-time costs of computation and communication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeterogeneityProfile {
    pub base_compute_time: f64,
    pub transfer_time_per_element: f64,
    pub intra_node_latency: f64,
    pub inter_node_latency: f64,
    /// One-way delay of every worker ↔ coordinator message.
    pub coordinator_latency: f64,
    /// Extra cost of a collective whose communicator missed the cache.
    pub communicator_setup: f64,
    /// Per-worker compute multipliers; empty means all 1.
    pub slowdown: Vec<f64>,
}

impl Default for HeterogeneityProfile {
    fn default() -> Self {
        HeterogeneityProfile {
            base_compute_time: 1.0,
            transfer_time_per_element: 1e-4,
            intra_node_latency: 0.001,
            inter_node_latency: 0.01,
            coordinator_latency: 0.001,
            communicator_setup: 0.0,
            slowdown: Vec::new(),
        }
    }
}

impl HeterogeneityProfile {
    pub fn validate(&self, n: usize) -> Result<(), SimError> {
        let fields = [
            ("base_compute_time", self.base_compute_time),
            ("transfer_time_per_element", self.transfer_time_per_element),
            ("intra_node_latency", self.intra_node_latency),
            ("inter_node_latency", self.inter_node_latency),
            ("coordinator_latency", self.coordinator_latency),
            ("communicator_setup", self.communicator_setup),
        ];
        for (field, value) in fields {
            if !value.is_finite() || value < 0.0 {
                return Err(SimError::InvalidCost { field, value });
            }
        }
        if !self.slowdown.is_empty() && self.slowdown.len() != n {
            return Err(SimError::SlowdownCount {
                got: self.slowdown.len(),
                n,
            });
        }
        for (worker, &value) in self.slowdown.iter().enumerate() {
            if !value.is_finite() || value < 1.0 {
                return Err(SimError::InvalidSlowdown { worker, value });
            }
        }
        Ok(())
    }

    pub fn slowdown_of(&self, worker: usize) -> f64 {
        self.slowdown.get(worker).copied().unwrap_or(1.0)
    }

    pub fn compute_time(&self, worker: usize) -> f64 {
        self.base_compute_time * self.slowdown_of(worker)
    }

    pub fn link_latency(&self, nodes: &NodeMap, a: usize, b: usize) -> f64 {
        if nodes.same_node(a, b) {
            self.intra_node_latency
        } else {
            self.inter_node_latency
        }
    }

    fn max_latency(&self, nodes: &NodeMap, members: &[usize]) -> f64 {
        let mut worst = 0.0f64;
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                worst = worst.max(self.link_latency(nodes, a, b));
            }
        }
        worst
    }

    /// Ring all-reduce over `group` for a vector of `len` elements:
    /// `2(|G|−1)/|G| · len · t_elem + max member link latency`; free for a
    /// singleton.
    pub fn preduce_cost(&self, nodes: &NodeMap, group: &GroupSpec, len: usize) -> f64 {
        let p = group.len();
        if p <= 1 {
            return 0.0;
        }
        let volume = 2.0 * (p - 1) as f64 / p as f64 * len as f64;
        volume * self.transfer_time_per_element + self.max_latency(nodes, group.members())
    }

    /// One synchronous parameter-server round: every worker's gradient in
    /// and the model out again over the server's single link.
    pub fn ps_round_cost(&self, nodes: &NodeMap, len: usize) -> f64 {
        let n = nodes.workers();
        let all: Vec<usize> = (0..n).collect();
        2.0 * n as f64 * len as f64 * self.transfer_time_per_element + self.max_latency(nodes, &all)
    }
}

struct Entry<T> {
    time: f64,
    seq: u64,
    payload: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

/// Pending events ordered by `(time, insertion sequence)`.
pub struct EventQueue<T> {
    heap: BinaryHeap<Reverse<Entry<T>>>,
    next_seq: u64,
    now: f64,
}

impl<T> Default for EventQueue<T> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: 0.0,
        }
    }
}

impl<T> EventQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Schedule `payload` at `time`, never earlier than the current clock.
    pub fn schedule(&mut self, time: f64, payload: T) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry {
            time: time.max(self.now),
            seq,
            payload,
        }));
        seq
    }

    /// Pop the globally earliest event and move the clock to it.
    pub fn advance_clock(&mut self) -> Option<(f64, T)> {
        let Reverse(e) = self.heap.pop()?;
        self.now = e.time;
        Some((e.time, e.payload))
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn clear(&mut self) {
        self.heap.clear();
    }
}

/// One line of a run trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<usize>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    ComputeStart { iteration: u64 },
    ComputeEnd { iteration: u64 },
    GgRequest,
    GgGrant { group: u64, members: Vec<usize> },
    LockAcquire { group: u64, members: Vec<usize> },
    LockRelease { group: u64, members: Vec<usize> },
    Queued { group: u64, members: Vec<usize> },
    GbPush { group: u64 },
    Division { groups: Vec<Vec<usize>> },
    PreduceStart { group: u64, members: Vec<usize> },
    PreduceEnd { group: u64, members: Vec<usize> },
    Skip { round: u64 },
    Eval { iteration: u64, loss: f64 },
    RunEnd { status: String },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::ComputeStart { .. } => "compute-start",
            EventKind::ComputeEnd { .. } => "compute-end",
            EventKind::GgRequest => "gg-request",
            EventKind::GgGrant { .. } => "gg-grant",
            EventKind::LockAcquire { .. } => "lock-acquire",
            EventKind::LockRelease { .. } => "lock-release",
            EventKind::Queued { .. } => "queued",
            EventKind::GbPush { .. } => "gb-push",
            EventKind::Division { .. } => "division",
            EventKind::PreduceStart { .. } => "preduce-start",
            EventKind::PreduceEnd { .. } => "preduce-end",
            EventKind::Skip { .. } => "skip",
            EventKind::Eval { .. } => "eval",
            EventKind::RunEnd { .. } => "run-end",
        }
    }
}

/// Append-only run trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    events: Vec<SimEvent>,
    enabled: bool,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Trace {
            events: Vec::new(),
            enabled,
        }
    }

    pub fn from_events(events: Vec<SimEvent>) -> Self {
        Trace { events, enabled: true }
    }

    pub fn record(&mut self, time: f64, worker: Option<usize>, kind: EventKind) {
        if self.enabled {
            let seq = self.events.len() as u64;
            self.events.push(SimEvent {
                time,
                seq,
                worker,
                kind,
            });
        }
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<SimEvent> {
        self.events
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, SimError> {
        let mut events = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(&line).map_err(|source| SimError::TraceParse { line: i + 1, source })?;
            events.push(e);
        }
        Ok(Trace::from_events(events))
    }
}

//! Partial all-reduce: ring reduce-scatter followed by ring all-gather among
//! the members of one group.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Duration;

use crate::coordinator::GroupSeq;
use crate::gossip::GroupSpec;
use crate::model::ParamVector;
use crate::transport::{Link, SimNetwork, TransportError};

const HEADER: usize = 16;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CollectiveError {
    #[error("worker {worker} is not a member of group {seq}")]
    NotMember { worker: usize, seq: GroupSeq },
    #[error("worker {worker} expected group {expected_seq} step {expected_step}, got group {seq} step {step}")]
    Mismatch {
        worker: usize,
        expected_seq: GroupSeq,
        expected_step: u32,
        seq: GroupSeq,
        step: u32,
    },
    #[error("worker {worker} timed out waiting for member {missing} in group {seq}")]
    Timeout {
        worker: usize,
        missing: usize,
        seq: GroupSeq,
    },
    #[error("worker {worker} lost its channel to member {peer} in group {seq}")]
    Closed { worker: usize, peer: usize, seq: GroupSeq },
    #[error("malformed chunk: {0}")]
    Malformed(String),
    #[error("members supplied vectors of different lengths")]
    LengthMismatch,
    #[error(transparent)]
    Transport(TransportError),
}

/// Agreed ring order for one group: ascending ids, successor wraps around.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Communicator {
    members: Vec<usize>,
    session: u64,
}

impl Communicator {
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn session(&self) -> u64 {
        self.session
    }

    pub fn position(&self, worker: usize) -> Option<usize> {
        self.members.binary_search(&worker).ok()
    }

    pub fn successor(&self, worker: usize) -> Option<usize> {
        self.position(worker)
            .map(|p| self.members[(p + 1) % self.members.len()])
    }

    pub fn predecessor(&self, worker: usize) -> Option<usize> {
        let p = self.members.len();
        self.position(worker).map(|i| self.members[(i + p - 1) % p])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Inserted,
    Ephemeral,
}

/// Communicators keyed by member set. Once full it keeps its entries and
/// hands out throwaway communicators for new groups.
#[derive(Clone, Debug)]
pub struct CommunicatorCache {
    capacity: usize,
    entries: BTreeMap<Vec<usize>, Communicator>,
    next_session: u64,
}

impl Default for CommunicatorCache {
    fn default() -> Self {
        CommunicatorCache::new(64)
    }
}

impl CommunicatorCache {
    pub fn new(capacity: usize) -> Self {
        CommunicatorCache {
            capacity,
            entries: BTreeMap::new(),
            next_session: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&mut self, group: &GroupSpec) -> (Communicator, CacheOutcome) {
        if let Some(c) = self.entries.get(group.members()) {
            return (c.clone(), CacheOutcome::Hit);
        }
        let comm = Communicator {
            members: group.members().to_vec(),
            session: self.next_session,
        };
        self.next_session += 1;
        if self.entries.len() < self.capacity {
            self.entries.insert(comm.members.clone(), comm.clone());
            (comm, CacheOutcome::Inserted)
        } else {
            (comm, CacheOutcome::Ephemeral)
        }
    }
}

/// `len` split into `parts` contiguous chunks of `⌈len/parts⌉`, the tail ones
/// shorter or empty.
pub fn chunk_ranges(len: usize, parts: usize) -> Vec<Range<usize>> {
    let size = len.div_ceil(parts.max(1));
    (0..parts)
        .map(|c| (c * size).min(len)..((c + 1) * size).min(len))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RingPhase {
    ReduceScatter,
    AllGather,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RingStep {
    pub step: u32,
    pub phase: RingPhase,
    pub send_to: usize,
    pub send_chunk: usize,
    pub recv_from: usize,
    pub recv_chunk: usize,
}

/// The `2(|G|−1)` steps `worker` performs; empty for a singleton group.
pub fn ring_allreduce_schedule(group: &GroupSpec, worker: usize) -> Option<Vec<RingStep>> {
    let members = group.members();
    let p = members.len();
    let r = members.binary_search(&worker).ok()?;
    let send_to = members[(r + 1) % p];
    let recv_from = members[(r + p - 1) % p];
    let mut steps = Vec::with_capacity(2 * (p - 1));
    for s in 0..p.saturating_sub(1) {
        steps.push(RingStep {
            step: s as u32,
            phase: RingPhase::ReduceScatter,
            send_to,
            send_chunk: (r + p - s) % p,
            recv_from,
            recv_chunk: (r + 2 * p - s - 1) % p,
        });
    }
    for t in 0..p.saturating_sub(1) {
        steps.push(RingStep {
            step: (p - 1 + t) as u32,
            phase: RingPhase::AllGather,
            send_to,
            send_chunk: (r + 1 + p - t) % p,
            recv_from,
            recv_chunk: (r + p - t) % p,
        });
    }
    Some(steps)
}

/// `seq` (u64 LE), `step` (u32 LE), value count (u32 LE), then f64 LE values.
pub fn encode_chunk(seq: GroupSeq, step: u32, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * values.len());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_chunk(bytes: &[u8]) -> Result<(GroupSeq, u32, Vec<f64>), CollectiveError> {
    if bytes.len() < HEADER {
        return Err(CollectiveError::Malformed(format!("{} byte message", bytes.len())));
    }
    let seq = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes"));
    let step = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[HEADER..];
    if body.len() != 8 * len {
        return Err(CollectiveError::Malformed(format!(
            "header announces {len} values, body has {} bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((seq, step, values))
}

/// One member's progress through the ring schedule.
struct RingMember {
    worker: usize,
    seq: GroupSeq,
    p: usize,
    owned: usize,
    steps: Vec<RingStep>,
    ranges: Vec<Range<usize>>,
    buf: Vec<f64>,
}

impl RingMember {
    fn new(group: &GroupSpec, seq: GroupSeq, worker: usize, local: &ParamVector) -> Result<Self, CollectiveError> {
        let steps = ring_allreduce_schedule(group, worker).ok_or(CollectiveError::NotMember { worker, seq })?;
        let p = group.len();
        let r = group.members().binary_search(&worker).expect("member");
        Ok(RingMember {
            worker,
            seq,
            p,
            owned: (r + 1) % p,
            steps,
            ranges: chunk_ranges(local.len(), p),
            buf: local.to_vec(),
        })
    }

    fn outgoing(&self, i: usize) -> (usize, Vec<u8>) {
        let s = &self.steps[i];
        (
            s.send_to,
            encode_chunk(self.seq, s.step, &self.buf[self.ranges[s.send_chunk].clone()]),
        )
    }

    fn incoming(&mut self, i: usize, bytes: &[u8]) -> Result<(), CollectiveError> {
        let s = self.steps[i];
        let (seq, step, values) = decode_chunk(bytes)?;
        if seq != self.seq || step != s.step {
            return Err(CollectiveError::Mismatch {
                worker: self.worker,
                expected_seq: self.seq,
                expected_step: s.step,
                seq,
                step,
            });
        }
        let range = self.ranges[s.recv_chunk].clone();
        if values.len() != range.len() {
            return Err(CollectiveError::LengthMismatch);
        }
        let target = &mut self.buf[range];
        match s.phase {
            RingPhase::ReduceScatter => {
                for (t, v) in target.iter_mut().zip(values) {
                    *t += v;
                }
                if i + 2 == self.p {
                    let scale = self.p as f64;
                    for v in &mut self.buf[self.ranges[self.owned].clone()] {
                        *v /= scale;
                    }
                }
            }
            RingPhase::AllGather => target.copy_from_slice(&values),
        }
        Ok(())
    }
}

fn transport_error(e: TransportError, worker: usize, seq: GroupSeq) -> CollectiveError {
    match e {
        TransportError::Timeout { from, .. } => CollectiveError::Timeout {
            worker,
            missing: from,
            seq,
        },
        TransportError::Closed { peer, .. } => CollectiveError::Closed { worker, peer, seq },
        other => CollectiveError::Transport(other),
    }
}

/// Run this member's half of the collective over `link`. Every member of
/// `group` must call it with the same `seq`; all return the same mean.
pub fn preduce<L: Link>(
    link: &mut L,
    group: &GroupSpec,
    seq: GroupSeq,
    local: &ParamVector,
    timeout: Option<Duration>,
) -> Result<ParamVector, CollectiveError> {
    let worker = link.id();
    let mut member = RingMember::new(group, seq, worker, local)?;
    for i in 0..member.steps.len() {
        let (to, msg) = member.outgoing(i);
        link.send(to, msg).map_err(|e| transport_error(e, worker, seq))?;
        let from = member.steps[i].recv_from;
        let bytes = link.recv(from, timeout).map_err(|e| transport_error(e, worker, seq))?;
        member.incoming(i, &bytes)?;
    }
    Ok(ParamVector::new(member.buf))
}

/// All members' halves of the collective advanced step by step over the
/// simulated network. `inputs[i]` belongs to `group.members()[i]`.
pub fn preduce_lockstep(
    net: &mut SimNetwork,
    group: &GroupSpec,
    seq: GroupSeq,
    inputs: &[&ParamVector],
) -> Result<Vec<ParamVector>, CollectiveError> {
    if inputs.len() != group.len() || inputs.iter().any(|x| x.len() != inputs[0].len()) {
        return Err(CollectiveError::LengthMismatch);
    }
    let mut members = group
        .members()
        .iter()
        .zip(inputs)
        .map(|(&w, x)| RingMember::new(group, seq, w, x))
        .collect::<Result<Vec<_>, _>>()?;
    let steps = 2 * (group.len() - 1);
    for i in 0..steps {
        for m in &members {
            let (to, msg) = m.outgoing(i);
            net.link(m.worker)
                .send(to, msg)
                .map_err(|e| transport_error(e, m.worker, seq))?;
        }
        for m in &mut members {
            let from = m.steps[i].recv_from;
            let bytes = net
                .link(m.worker)
                .recv(from, None)
                .map_err(|e| transport_error(e, m.worker, seq))?;
            m.incoming(i, &bytes)?;
        }
    }
    Ok(members.into_iter().map(|m| ParamVector::new(m.buf)).collect())
}

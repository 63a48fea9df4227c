//! Trace checks: group atomicity, lock discipline, buffer order, division
//! shape, deadlocks and per-worker time split.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::sim::{EventKind, SimEvent};
use crate::trainer::{measure_sync_ratio, SyncRatio};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub check: String,
    pub seq: u64,
    pub time: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub events: usize,
    pub workers: usize,
    pub groups: usize,
    pub status: Option<String>,
    /// Two groups sharing a member whose collective intervals overlap.
    pub overlaps: usize,
    /// Lock taken while already held, or released by a non-holder.
    pub lock_errors: usize,
    /// Groups that locked only some of their members.
    pub partial_acquisitions: usize,
    /// Cycles of groups each holding a lock another one waits for.
    pub cyclic_waits: usize,
    /// Buffered groups executed out of push order.
    pub fifo_violations: usize,
    /// Divisions whose groups are not disjoint.
    pub division_violations: usize,
    pub deadlocks: usize,
    pub sync_ratios: Vec<SyncRatio>,
    /// First few findings, for diagnosis.
    pub findings: Vec<Finding>,
}

impl AnalysisReport {
    pub fn violations(&self) -> usize {
        self.overlaps
            + self.lock_errors
            + self.partial_acquisitions
            + self.cyclic_waits
            + self.fifo_violations
            + self.division_violations
            + self.deadlocks
    }

    pub fn is_clean(&self) -> bool {
        self.violations() == 0
    }
}

const MAX_FINDINGS: usize = 20;

struct Checker {
    report: AnalysisReport,
}

impl Checker {
    fn flag(&mut self, e: &SimEvent, check: &str, detail: String) {
        if self.report.findings.len() < MAX_FINDINGS {
            self.report.findings.push(Finding {
                check: check.into(),
                seq: e.seq,
                time: e.time,
                detail,
            });
        }
    }
}

/// Run every check over a trace.
pub fn analyze(events: &[SimEvent]) -> AnalysisReport {
    let workers = events
        .iter()
        .filter_map(|e| e.worker)
        .chain(events.iter().flat_map(|e| members_of(&e.kind).iter().copied()))
        .chain(events.iter().flat_map(|e| match &e.kind {
            EventKind::Division { groups } => groups.iter().flatten().copied().collect(),
            _ => Vec::new(),
        }))
        .max()
        .map_or(0, |w| w + 1);
    let mut c = Checker {
        report: AnalysisReport {
            events: events.len(),
            workers,
            ..AnalysisReport::default()
        },
    };
    check_intervals(&mut c, events, workers);
    check_locks(&mut c, events, workers);
    check_fifo(&mut c, events, workers);
    for e in events {
        match &e.kind {
            EventKind::Division { groups } => {
                let mut seen = vec![false; workers];
                for g in groups {
                    for &m in g {
                        if std::mem::replace(&mut seen[m], true) {
                            c.report.division_violations += 1;
                            c.flag(e, "division", format!("worker {m} appears twice"));
                        }
                    }
                }
            }
            EventKind::RunEnd { status } => {
                if status == "deadlock" {
                    c.report.deadlocks += 1;
                    c.flag(e, "deadlock", "run ended with blocked workers".into());
                }
                c.report.status = Some(status.clone());
            }
            _ => {}
        }
    }
    c.report.sync_ratios = measure_sync_ratio(events, workers);
    c.report
}

fn members_of(kind: &EventKind) -> &[usize] {
    match kind {
        EventKind::GgGrant { members, .. }
        | EventKind::LockAcquire { members, .. }
        | EventKind::LockRelease { members, .. }
        | EventKind::Queued { members, .. }
        | EventKind::PreduceStart { members, .. }
        | EventKind::PreduceEnd { members, .. } => members,
        _ => &[],
    }
}

/// Each group's collective spans from its first start to its last end; no
/// worker may be inside two spans at once.
fn check_intervals(c: &mut Checker, events: &[SimEvent], workers: usize) {
    struct Span {
        start: f64,
        end: Option<f64>,
        members: Vec<usize>,
        first: usize,
    }
    let mut spans: BTreeMap<u64, Span> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        match &e.kind {
            EventKind::PreduceStart { group, members } => {
                spans.entry(*group).or_insert(Span {
                    start: e.time,
                    end: None,
                    members: members.clone(),
                    first: i,
                });
            }
            EventKind::PreduceEnd { group, .. } => {
                if let Some(s) = spans.get_mut(group) {
                    s.end = Some(s.end.map_or(e.time, |t: f64| t.max(e.time)));
                }
            }
            _ => {}
        }
    }
    c.report.groups = spans.len();
    let end_of_trace = events.last().map_or(0.0, |e| e.time);
    let mut per_worker: Vec<Vec<(f64, f64, u64, usize)>> = vec![Vec::new(); workers];
    for (&g, s) in &spans {
        for &m in &s.members {
            per_worker[m].push((s.start, s.end.unwrap_or(end_of_trace), g, s.first));
        }
    }
    for (w, list) in per_worker.iter_mut().enumerate() {
        list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.3.cmp(&b.3)));
        for pair in list.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b.0 < a.1 {
                c.report.overlaps += 1;
                let e = &events[b.3];
                c.flag(
                    e,
                    "overlap",
                    format!("worker {w}: group {} starts inside group {}", b.2, a.2),
                );
            }
        }
    }
}

/// Per-member locks must be taken by one group at a time, all at once; a
/// queued group waits for the holders of its members.
fn check_locks(c: &mut Checker, events: &[SimEvent], workers: usize) {
    let mut holder: Vec<Option<u64>> = vec![None; workers];
    let mut declared: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut held: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut waiting: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for e in events {
        match &e.kind {
            EventKind::Queued { group, members } | EventKind::GgGrant { group, members } => {
                declared.entry(*group).or_insert_with(|| members.clone());
                if matches!(e.kind, EventKind::Queued { .. }) {
                    waiting.insert(*group, members.clone());
                }
            }
            EventKind::LockAcquire { group, members } => {
                waiting.remove(group);
                if let Some(d) = declared.get(group) {
                    if d != members {
                        c.report.partial_acquisitions += 1;
                        c.flag(
                            e,
                            "partial-acquire",
                            format!("group {group} locked {members:?} of {d:?}"),
                        );
                    }
                }
                for &m in members {
                    if let Some(other) = holder[m] {
                        c.report.lock_errors += 1;
                        c.flag(e, "double-acquire", format!("worker {m} locked by {other} and {group}"));
                    }
                    holder[m] = Some(*group);
                }
                held.entry(*group).or_default().extend(members);
                if has_wait_cycle(&holder, &held, &waiting, &declared) {
                    c.report.cyclic_waits += 1;
                    c.flag(e, "cyclic-wait", format!("after group {group} locked"));
                }
            }
            EventKind::LockRelease { group, members } => {
                for &m in members {
                    if holder[m] != Some(*group) {
                        c.report.lock_errors += 1;
                        c.flag(
                            e,
                            "bad-release",
                            format!("worker {m} released by {group}, held by {:?}", holder[m]),
                        );
                    } else {
                        holder[m] = None;
                    }
                }
                held.remove(group);
            }
            _ => {}
        }
    }
}

/// A group that holds some locks and waits for others points at the
/// holders of the missing ones; a cycle among such groups is a deadlock.
fn has_wait_cycle(
    holder: &[Option<u64>],
    held: &HashMap<u64, Vec<usize>>,
    waiting: &BTreeMap<u64, Vec<usize>>,
    declared: &HashMap<u64, Vec<usize>>,
) -> bool {
    let edges = |g: u64| -> Vec<u64> {
        let want = declared.get(&g).or_else(|| waiting.get(&g));
        let have = held.get(&g);
        match (want, have) {
            (Some(want), Some(have)) if have.len() < want.len() => want
                .iter()
                .filter(|m| !have.contains(m))
                .filter_map(|&m| holder[m])
                .filter(|&h| h != g)
                .collect(),
            _ => Vec::new(),
        }
    };
    let mut state: HashMap<u64, u8> = HashMap::new();
    fn visit(g: u64, state: &mut HashMap<u64, u8>, edges: &dyn Fn(u64) -> Vec<u64>) -> bool {
        match state.get(&g) {
            Some(1) => return true,
            Some(_) => return false,
            None => {}
        }
        state.insert(g, 1);
        for h in edges(g) {
            if visit(h, state, edges) {
                return true;
            }
        }
        state.insert(g, 2);
        false
    }
    let mut starts: Vec<u64> = held.keys().copied().collect();
    starts.sort_unstable();
    starts.into_iter().any(|g| visit(g, &mut state, &edges))
}

/// Groups pushed to a worker's buffer must start in push order.
fn check_fifo(c: &mut Checker, events: &[SimEvent], workers: usize) {
    let mut buffers: Vec<VecDeque<u64>> = vec![VecDeque::new(); workers];
    for e in events {
        match &e.kind {
            EventKind::GbPush { group } => {
                if let Some(w) = e.worker {
                    buffers[w].push_back(*group);
                }
            }
            EventKind::PreduceStart { group, .. } => {
                let Some(w) = e.worker else { continue };
                let Some(pos) = buffers[w].iter().position(|g| g == group) else {
                    continue;
                };
                if pos != 0 {
                    c.report.fifo_violations += 1;
                    c.flag(
                        e,
                        "fifo",
                        format!("worker {w} ran group {group} ahead of {:?}", buffers[w][0]),
                    );
                }
                buffers[w].remove(pos);
            }
            _ => {}
        }
    }
}

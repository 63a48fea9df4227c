//! Periodic conflict-free group schedules evaluated locally by each worker.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gossip::GroupSpec;

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("schedule needs at least one node and one worker per node")]
    EmptyCluster,
    #[error("schedule has no phases")]
    NoPhases,
    #[error("phase {phase} names worker {worker}, but the cluster has {n} workers")]
    OutOfRange { phase: usize, worker: usize, n: usize },
    #[error("phase {phase} has an empty group")]
    EmptyGroup { phase: usize },
    #[error("schedule covers {rule} workers but the run has {n}")]
    WrongSize { rule: usize, n: usize },
    #[error("schedule file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schedule file: {0}")]
    Io(#[from] std::io::Error),
}

/// One step of the cycle: concurrent groups and the workers sitting it out.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub skip: Vec<usize>,
}

/// What a worker does in one synchronization round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Assignment {
    Group(GroupSpec),
    Skip,
}

/// First conflict found by [`ScheduleRule::validate_conflict_free`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub phase: usize,
    pub worker: usize,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "worker {} is in two groups of phase {}", self.worker, self.phase)
    }
}

/// Where a run gets its static schedule from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RuleSource {
    #[serde(rename = "builtin-4x4")]
    Builtin4x4,
    Generalized {
        nodes: usize,
        per_node: usize,
    },
    FromFile {
        path: std::path::PathBuf,
    },
}

impl RuleSource {
    pub fn build(&self, n: usize) -> Result<ScheduleRule, ScheduleError> {
        let rule = match self {
            RuleSource::Builtin4x4 => ScheduleRule::builtin_4x4(),
            RuleSource::Generalized { nodes, per_node } => ScheduleRule::generalized(*nodes, *per_node)?,
            RuleSource::FromFile { path } => return ScheduleRule::from_path(path, n),
        };
        if rule.workers() != n {
            return Err(ScheduleError::WrongSize {
                rule: rule.workers(),
                n,
            });
        }
        Ok(rule)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduleRule {
    n: usize,
    phases: Vec<Phase>,
}

impl ScheduleRule {
    /// Four nodes of four workers with the fixed two-thread pattern.
    pub fn builtin_4x4() -> Self {
        ScheduleRule::generalized(4, 4).expect("4x4 is a valid layout")
    }

    /// Worker `node · m + rank`, cycle of four phases:
    ///
    /// * 0: all rank-0 workers form one cross-node group; the other ranks
    ///   pair up locally, rank 1 skipping when their count is odd;
    /// * 1, 3: whole-node groups;
    /// * 2: rank 1 pairs with rank 1 of the node halfway around the node
    ///   ring; the remaining ranks pair locally outside-in, an odd one out
    ///   skipping.
    pub fn generalized(nodes: usize, m: usize) -> Result<Self, ScheduleError> {
        if nodes == 0 || m == 0 {
            return Err(ScheduleError::EmptyCluster);
        }
        let id = |node: usize, rank: usize| node * m + rank;
        let whole_nodes = Phase {
            groups: (0..nodes).map(|node| (0..m).map(|r| id(node, r)).collect()).collect(),
            skip: Vec::new(),
        };

        let mut p0 = Phase::default();
        p0.groups.push((0..nodes).map(|node| id(node, 0)).collect());
        let mut rest: Vec<usize> = (1..m).collect();
        let skip0 = if rest.len() % 2 == 1 {
            Some(rest.remove(0))
        } else {
            None
        };
        for node in 0..nodes {
            if let Some(r) = skip0 {
                p0.skip.push(id(node, r));
            }
            for pair in rest.chunks(2) {
                p0.groups.push(pair.iter().map(|&r| id(node, r)).collect());
            }
        }

        let mut p2 = Phase::default();
        if m >= 2 {
            let half = nodes / 2;
            for node in 0..half {
                p2.groups.push(vec![id(node, 1), id(node + half, 1)]);
            }
            if nodes % 2 == 1 {
                p2.skip.push(id(nodes - 1, 1));
            }
        }
        let others: Vec<usize> = std::iter::once(0).chain(2..m).collect();
        for node in 0..nodes {
            let (mut lo, mut hi) = (0, others.len());
            while hi - lo >= 2 {
                p2.groups.push(vec![id(node, others[lo]), id(node, others[hi - 1])]);
                lo += 1;
                hi -= 1;
            }
            if hi - lo == 1 {
                p2.skip.push(id(node, others[lo]));
            }
        }
        ScheduleRule::from_phases(nodes * m, vec![p0, whole_nodes.clone(), p2, whole_nodes])
    }

    /// Structural checks only; conflicts are left to
    /// [`validate_conflict_free`](Self::validate_conflict_free).
    pub fn from_phases(n: usize, phases: Vec<Phase>) -> Result<Self, ScheduleError> {
        if n == 0 {
            return Err(ScheduleError::EmptyCluster);
        }
        if phases.is_empty() {
            return Err(ScheduleError::NoPhases);
        }
        for (p, phase) in phases.iter().enumerate() {
            if phase.groups.iter().any(|g| g.is_empty()) {
                return Err(ScheduleError::EmptyGroup { phase: p });
            }
            let all = phase.groups.iter().flatten().chain(&phase.skip);
            if let Some(&worker) = all.into_iter().find(|&&w| w >= n) {
                return Err(ScheduleError::OutOfRange { phase: p, worker, n });
            }
        }
        Ok(ScheduleRule { n, phases })
    }

    /// Reads the JSON phase list; `n` is the cluster size it must fit.
    pub fn from_json(json: &str, n: usize) -> Result<Self, ScheduleError> {
        ScheduleRule::from_phases(n, serde_json::from_str(json)?)
    }

    pub fn from_path(path: &Path, n: usize) -> Result<Self, ScheduleError> {
        ScheduleRule::from_json(&std::fs::read_to_string(path)?, n)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.phases).expect("phases serialize")
    }

    pub fn workers(&self) -> usize {
        self.n
    }

    pub fn cycle_len(&self) -> usize {
        self.phases.len()
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    /// Group for `worker` in synchronization round `round`; workers not named
    /// in a phase skip it.
    pub fn schedule_group(&self, worker: usize, round: u64) -> Assignment {
        let phase = &self.phases[(round % self.phases.len() as u64) as usize];
        match phase.groups.iter().find(|g| g.contains(&worker)) {
            Some(g) => Assignment::Group(GroupSpec::new(g.clone(), self.n).expect("validated at construction")),
            None => Assignment::Skip,
        }
    }

    /// Exhaustive check over one cycle that no worker is in two groups of
    /// the same phase, or both grouped and skipping.
    pub fn validate_conflict_free(&self) -> Result<(), Violation> {
        for (phase, p) in self.phases.iter().enumerate() {
            let mut seen = vec![false; self.n];
            for &worker in p.groups.iter().flatten().chain(&p.skip) {
                if std::mem::replace(&mut seen[worker], true) {
                    return Err(Violation { phase, worker });
                }
            }
        }
        Ok(())
    }

    /// Whether the union of all groups over one cycle connects every worker.
    pub fn cycle_connected(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for g in self.phases.iter().flat_map(|p| &p.groups) {
            for w in &g[1..] {
                let (a, b) = (find(&mut parent, g[0]), find(&mut parent, *w));
                parent[a] = b;
            }
        }
        let root = find(&mut parent, 0);
        (0..self.n).all(|w| find(&mut parent, w) == root)
    }
}

//! Group-generation policies viewed as random sources of synchronization
//! matrices, for spectral analysis.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coordinator::{generate_random_group, global_division, inter_intra_division};
use crate::gossip::{
    estimate_expected_gram, group_matrix, partition_matrix, spectral_gap, GossipError, GroupSpec, SpectralReport,
    SyncMatrix, SyncPolicy,
};
use crate::schedule::{RuleSource, ScheduleError, ScheduleRule};
use crate::topology::NodeMap;

/// Uniform random initiator, random group of `k` around it.
pub struct RandomGroups {
    pub n: usize,
    pub k: usize,
}

impl SyncPolicy for RandomGroups {
    fn n(&self) -> usize {
        self.n
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> SyncMatrix {
        let initiator = rng.random_range(0..self.n);
        let g = generate_random_group(rng, self.n, self.k, initiator);
        group_matrix(self.n, &g).expect("valid group")
    }
}

/// One global division of all workers into groups of `k`.
pub struct GlobalDivision {
    pub n: usize,
    pub k: usize,
}

impl SyncPolicy for GlobalDivision {
    fn n(&self) -> usize {
        self.n
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> SyncMatrix {
        let initiator = rng.random_range(0..self.n);
        let all: Vec<usize> = (0..self.n).collect();
        let groups = global_division(rng, self.n, self.k, initiator, &all);
        partition_matrix(self.n, &groups).expect("disjoint groups")
    }
}

/// Both rounds of an inter/intra division of all workers, with a random
/// head rotation.
pub struct InterIntra {
    pub nodes: NodeMap,
    pub k: usize,
}

impl SyncPolicy for InterIntra {
    fn n(&self) -> usize {
        self.nodes.workers()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> SyncMatrix {
        let n = self.n();
        let initiator = rng.random_range(0..n);
        let rotation: Vec<usize> = (0..self.nodes.nodes()).map(|_| rng.random_range(0..n)).collect();
        let all: Vec<usize> = (0..n).collect();
        let r = inter_intra_division(rng, self.k, &self.nodes, initiator, &all, &rotation);
        let inter = partition_matrix(n, &r.inter).expect("disjoint groups");
        let intra = partition_matrix(n, &r.intra).expect("disjoint groups");
        inter.then(&intra)
    }
}

/// A uniformly random phase of a static schedule.
pub struct StaticPhases {
    pub rule: ScheduleRule,
}

impl SyncPolicy for StaticPhases {
    fn n(&self) -> usize {
        self.rule.workers()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> SyncMatrix {
        let n = self.n();
        let phase = &self.rule.phases()[rng.random_range(0..self.rule.cycle_len())];
        let groups: Vec<GroupSpec> = phase
            .groups
            .iter()
            .map(|g| GroupSpec::new(g.clone(), n).expect("validated rule"))
            .collect();
        partition_matrix(n, &groups).expect("conflict-free rule")
    }
}

/// Random groups that never cross between the lower and upper half of the
/// workers: a policy whose communication graph is disconnected.
pub struct DisconnectedHalves {
    pub n: usize,
    pub k: usize,
}

impl SyncPolicy for DisconnectedHalves {
    fn n(&self) -> usize {
        self.n
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> SyncMatrix {
        let half = self.n / 2;
        let (base, size) = if rng.random_bool(0.5) {
            (0, half)
        } else {
            (half, self.n - half)
        };
        let initiator = rng.random_range(0..size);
        let local = generate_random_group(rng, size, self.k.min(size), initiator);
        let members = local.members().iter().map(|&w| base + w).collect();
        group_matrix(self.n, &GroupSpec::new(members, self.n).expect("in range")).expect("valid group")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid policy: {0}")]
    Invalid(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Gossip(#[from] GossipError),
}

/// Serializable description of a policy to analyze.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicySpec {
    RandomGroups {
        workers: usize,
        group_size: usize,
    },
    GlobalDivision {
        workers: usize,
        group_size: usize,
    },
    InterIntra {
        nodes: usize,
        per_node: usize,
        group_size: usize,
    },
    StaticSchedule {
        workers: usize,
        rule: RuleSource,
    },
    DisconnectedHalves {
        workers: usize,
        group_size: usize,
    },
}

impl PolicySpec {
    pub fn build(&self) -> Result<Box<dyn SyncPolicy + Send + Sync>, PolicyError> {
        let check = |n: usize, k: usize| {
            if n == 0 || k == 0 || k > n {
                Err(PolicyError::Invalid(format!("group size {k} with {n} workers")))
            } else {
                Ok(())
            }
        };
        Ok(match self {
            PolicySpec::RandomGroups { workers, group_size } => {
                check(*workers, *group_size)?;
                Box::new(RandomGroups {
                    n: *workers,
                    k: *group_size,
                })
            }
            PolicySpec::GlobalDivision { workers, group_size } => {
                check(*workers, *group_size)?;
                Box::new(GlobalDivision {
                    n: *workers,
                    k: *group_size,
                })
            }
            PolicySpec::InterIntra {
                nodes,
                per_node,
                group_size,
            } => {
                check(nodes * per_node, *group_size)?;
                Box::new(InterIntra {
                    nodes: NodeMap::uniform(*nodes, *per_node),
                    k: *group_size,
                })
            }
            PolicySpec::StaticSchedule { workers, rule } => Box::new(StaticPhases {
                rule: rule.build(*workers)?,
            }),
            PolicySpec::DisconnectedHalves { workers, group_size } => {
                check(workers / 2, *group_size)?;
                Box::new(DisconnectedHalves {
                    n: *workers,
                    k: *group_size,
                })
            }
        })
    }

    /// Spectral report of the Monte Carlo estimate of `E[WᵀW]`.
    pub fn analyze(&self, samples: usize, seed: u64) -> Result<SpectralReport, PolicyError> {
        let policy = self.build()?;
        let gram = estimate_expected_gram(policy.as_ref(), samples, seed)?;
        Ok(spectral_gap(&gram, samples)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gossip::check_doubly_stochastic;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn draws_are_doubly_stochastic() {
        let specs = [
            PolicySpec::RandomGroups {
                workers: 8,
                group_size: 3,
            },
            PolicySpec::GlobalDivision {
                workers: 8,
                group_size: 3,
            },
            PolicySpec::InterIntra {
                nodes: 2,
                per_node: 4,
                group_size: 2,
            },
            PolicySpec::StaticSchedule {
                workers: 16,
                rule: RuleSource::Builtin4x4,
            },
            PolicySpec::DisconnectedHalves {
                workers: 8,
                group_size: 3,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in &specs {
            let p = s.build().unwrap();
            for _ in 0..20 {
                assert!(check_doubly_stochastic(&p.draw(&mut rng)).doubly_stochastic, "{s:?}");
            }
        }
    }

    #[test]
    fn halves_never_mix() {
        let p = DisconnectedHalves { n: 6, k: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let w = p.draw(&mut rng);
            for i in 0..3 {
                for j in 3..6 {
                    assert_eq!(w.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn connected_vs_disconnected_spectrum() {
        let connected = PolicySpec::RandomGroups {
            workers: 8,
            group_size: 3,
        }
        .analyze(2000, 0)
        .unwrap();
        assert!(connected.rho < 0.999);
        let split = PolicySpec::DisconnectedHalves {
            workers: 8,
            group_size: 3,
        }
        .analyze(2000, 0)
        .unwrap();
        assert!((split.rho - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(PolicySpec::RandomGroups {
            workers: 2,
            group_size: 3
        }
        .build()
        .is_err());
        assert!(PolicySpec::StaticSchedule {
            workers: 8,
            rule: RuleSource::Builtin4x4
        }
        .build()
        .is_err());
    }
}

//! Synchronization matrices and their convergence diagnostics.
//!
//! Parameters of `n` workers are stacked as the columns of an `N × n` matrix
//! `X`; one averaging event is the right-multiplication `X·W` by a doubly
//! stochastic `W`. These dense matrices are an analysis tool; the training
//! runtime averages through the collective and never builds them.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::ParamVector;

/// Row/column sum tolerance for a single synchronization matrix.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Largest asymmetry folded away before an eigendecomposition.
pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GossipError {
    #[error("worker {worker} out of range for {n} workers")]
    WorkerOutOfRange { worker: usize, n: usize },
    #[error("pairwise synchronization needs two distinct workers, got {0} twice")]
    SameWorker(usize),
    #[error("group is empty")]
    EmptyGroup,
    #[error("worker {0} listed twice in group")]
    DuplicateMember(usize),
    #[error("matrix is not doubly stochastic (max deviation {0:e})")]
    NotDoublyStochastic(f64),
    #[error("matrix has shape {rows}x{cols}, expected square {n}x{n}")]
    Shape { rows: usize, cols: usize, n: usize },
    #[error("matrix asymmetry {0:e} exceeds tolerance")]
    Asymmetric(f64),
    #[error("eigensolver did not converge")]
    NoConvergence,
    #[error("need at least one sample")]
    NoSamples,
}

/// Sorted set of distinct worker ids.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupSpec(Vec<usize>);

impl GroupSpec {
    pub fn new(mut members: Vec<usize>, n: usize) -> Result<Self, GossipError> {
        if members.is_empty() {
            return Err(GossipError::EmptyGroup);
        }
        members.sort_unstable();
        for w in members.windows(2) {
            if w[0] == w[1] {
                return Err(GossipError::DuplicateMember(w[0]));
            }
        }
        if let Some(&worker) = members.iter().find(|&&w| w >= n) {
            return Err(GossipError::WorkerOutOfRange { worker, n });
        }
        Ok(GroupSpec(members))
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, worker: usize) -> bool {
        self.0.binary_search(&worker).is_ok()
    }

    pub fn overlaps(&self, other: &GroupSpec) -> bool {
        self.0.iter().any(|&w| other.contains(w))
    }
}

/// A square doubly stochastic matrix with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncMatrix(DMatrix<f64>);

impl SyncMatrix {
    /// Validate and wrap; accepts row/column sums within `1e-9` so that
    /// long products and Monte Carlo means are representable.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self, GossipError> {
        if m.nrows() != m.ncols() {
            return Err(GossipError::Shape {
                rows: m.nrows(),
                cols: m.ncols(),
                n: m.nrows(),
            });
        }
        let dev = stochastic_deviation(&m);
        let in_range = m.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v));
        if dev > 1e-9 || !in_range {
            return Err(GossipError::NotDoublyStochastic(dev));
        }
        Ok(SyncMatrix(m))
    }

    pub fn identity(n: usize) -> Self {
        SyncMatrix(DMatrix::identity(n, n))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// `self · other`; doubly stochastic matrices are closed under products.
    pub fn then(&self, other: &SyncMatrix) -> SyncMatrix {
        SyncMatrix(&self.0 * &other.0)
    }

    /// `Wᵀ·W`.
    pub fn gram(&self) -> SyncMatrix {
        SyncMatrix(self.0.transpose() * &self.0)
    }
}

fn stochastic_deviation(m: &DMatrix<f64>) -> f64 {
    let rows = m.row_iter().map(|r| (r.sum() - 1.0).abs());
    let cols = m.column_iter().map(|c| (c.sum() - 1.0).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Pairwise averaging between workers `i` and `j`.
pub fn pairwise_matrix(n: usize, i: usize, j: usize) -> Result<SyncMatrix, GossipError> {
    for w in [i, j] {
        if w >= n {
            return Err(GossipError::WorkerOutOfRange { worker: w, n });
        }
    }
    if i == j {
        return Err(GossipError::SameWorker(i));
    }
    let mut m = DMatrix::identity(n, n);
    for (r, c) in [(i, i), (i, j), (j, i), (j, j)] {
        m[(r, c)] = 0.5;
    }
    Ok(SyncMatrix(m))
}

/// `1/|G|` on the `G × G` block, identity elsewhere.
pub fn group_matrix(n: usize, group: &GroupSpec) -> Result<SyncMatrix, GossipError> {
    if let Some(&worker) = group.members().iter().find(|&&w| w >= n) {
        return Err(GossipError::WorkerOutOfRange { worker, n });
    }
    let mut m = DMatrix::identity(n, n);
    let share = 1.0 / group.len() as f64;
    for &r in group.members() {
        for &c in group.members() {
            m[(r, c)] = share;
        }
    }
    Ok(SyncMatrix(m))
}

/// Product of the matrices of pairwise-disjoint groups (they commute).
pub fn partition_matrix(n: usize, groups: &[GroupSpec]) -> Result<SyncMatrix, GossipError> {
    let mut m = DMatrix::identity(n, n);
    for g in groups {
        if let Some(&worker) = g.members().iter().find(|&&w| w >= n) {
            return Err(GossipError::WorkerOutOfRange { worker, n });
        }
        let share = 1.0 / g.len() as f64;
        for &r in g.members() {
            m[(r, r)] = 0.0;
        }
        for &r in g.members() {
            for &c in g.members() {
                m[(r, c)] = share;
            }
        }
    }
    Ok(SyncMatrix(m))
}

/// Stack worker vectors as the columns of an `N × n` matrix.
pub fn stack(columns: &[ParamVector]) -> DMatrix<f64> {
    let rows = columns.first().map_or(0, |c| c.len());
    DMatrix::from_fn(rows, columns.len(), |r, c| columns[c][r])
}

pub fn unstack(x: &DMatrix<f64>) -> Vec<ParamVector> {
    x.column_iter()
        .map(|c| c.iter().copied().collect::<Vec<f64>>().into())
        .collect()
}

/// `X · W`.
pub fn apply(x: &DMatrix<f64>, w: &SyncMatrix) -> Result<DMatrix<f64>, GossipError> {
    if x.ncols() != w.n() {
        return Err(GossipError::Shape {
            rows: x.nrows(),
            cols: x.ncols(),
            n: w.n(),
        });
    }
    Ok(x * &w.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticReport {
    pub doubly_stochastic: bool,
    pub max_deviation: f64,
}

pub fn check_doubly_stochastic(w: &SyncMatrix) -> StochasticReport {
    let max_deviation = stochastic_deviation(&w.0);
    StochasticReport {
        doubly_stochastic: max_deviation <= STOCHASTIC_TOL,
        max_deviation,
    }
}

/// True iff `Fᵀ·F = F` entrywise within `1e-12`.
pub fn check_idempotent_symmetric(f: &SyncMatrix) -> bool {
    let g = f.0.transpose() * &f.0;
    g.iter().zip(f.0.iter()).all(|(a, b)| (a - b).abs() <= STOCHASTIC_TOL)
}

/// A random source of synchronization matrices, one per draw.
pub trait SyncPolicy {
    fn n(&self) -> usize;
    fn draw(&self, rng: &mut ChaCha8Rng) -> SyncMatrix;
}

/// Monte Carlo estimate of `E[WᵀW]` over `samples` draws of `policy`.
pub fn estimate_expected_gram(policy: &dyn SyncPolicy, samples: usize, seed: u64) -> Result<SyncMatrix, GossipError> {
    if samples == 0 {
        return Err(GossipError::NoSamples);
    }
    let n = policy.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for _ in 0..samples {
        let w = policy.draw(&mut rng);
        acc += w.0.transpose() * &w.0;
    }
    acc /= samples as f64;
    SyncMatrix::from_matrix(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub rho: f64,
    pub lambda2_abs: f64,
    pub lambdan_abs: f64,
    pub samples: usize,
}

/// Eigenvalues of a symmetric matrix in descending order.
pub fn sorted_eigenvalues(m: &SyncMatrix) -> Result<Vec<f64>, GossipError> {
    let a = &m.0;
    let asym = (a - a.transpose()).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if asym > SYMMETRY_TOL {
        return Err(GossipError::Asymmetric(asym));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, 1e-14, 10_000).ok_or(GossipError::NoConvergence)?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|x, y| y.total_cmp(x));
    Ok(values)
}

/// `max{|λ₂|, |λₙ|}` of a symmetric matrix; `samples` is carried through
/// from the estimate that produced it.
pub fn spectral_gap(m: &SyncMatrix, samples: usize) -> Result<SpectralReport, GossipError> {
    let values = sorted_eigenvalues(m)?;
    let (lambda2_abs, lambdan_abs) = if values.len() < 2 {
        (0.0, 0.0)
    } else {
        (values[1].abs(), values[values.len() - 1].abs())
    };
    Ok(SpectralReport {
        rho: lambda2_abs.max(lambdan_abs),
        lambda2_abs,
        lambdan_abs,
        samples,
    })
}

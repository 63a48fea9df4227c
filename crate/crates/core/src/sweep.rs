//! Grids of simulated runs and their summary table.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig, StragglerConfig, SweepAxes};
use crate::trainer::{measure_sync_ratio, run_simulated, AlgorithmKind, RunOutput, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run {run_id}: {source}")]
    Run {
        run_id: String,
        #[source]
        source: TrainError,
    },
    #[error("writing table: {0}")]
    Csv(#[from] csv::Error),
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub algorithm: AlgorithmKind,
    pub slowdown: f64,
    pub section_length: u64,
    pub status: String,
    pub time_to_threshold: Option<f64>,
    pub iterations_to_threshold: Option<u64>,
    pub end_time: f64,
    pub sync_fraction: f64,
    pub groups: u64,
    pub conflict_rate: Option<f64>,
    /// Baseline time-to-threshold over this row's.
    pub speedup: Option<f64>,
    /// Standard deviation of time-to-threshold across the seeds of this
    /// row's cell.
    pub time_std: Option<f64>,
}

fn or_default<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

/// Expand the axes of `base` into one config per run. Absent axes keep the
/// base value.
pub fn expand(base: &RunConfig) -> Vec<RunConfig> {
    let axes = base.sweep.clone().unwrap_or_default();
    let algorithms = or_default(&axes.algorithms, base.algorithm);
    let seeds = or_default(&axes.seeds, base.seed);
    let lengths = or_default(&axes.section_lengths, base.section_length);
    let slowdowns: Vec<Option<f64>> = if axes.slowdowns.is_empty() {
        vec![None]
    } else {
        axes.slowdowns.iter().map(|&s| Some(s)).collect()
    };
    let mut out = Vec::new();
    for &algorithm in &algorithms {
        for &slowdown in &slowdowns {
            for &section_length in &lengths {
                if algorithm == AlgorithmKind::CentralizedPs && section_length != 1 && lengths.len() > 1 {
                    continue;
                }
                for &seed in &seeds {
                    out.push(variant(base, algorithm, slowdown, section_length, seed));
                }
            }
        }
    }
    out
}

fn variant(
    base: &RunConfig,
    algorithm: AlgorithmKind,
    slowdown: Option<f64>,
    section_length: u64,
    seed: u64,
) -> RunConfig {
    let mut cfg = base.clone();
    cfg.sweep = None;
    cfg.algorithm = algorithm;
    cfg.section_length = section_length;
    cfg.seed = seed;
    if let Some(factor) = slowdown {
        let workers = base.straggler.as_ref().and_then(|s| s.workers.clone());
        cfg.straggler = (factor != 1.0).then_some(StragglerConfig { factor, workers });
    }
    cfg
}

fn slowdown_of(cfg: &RunConfig) -> f64 {
    cfg.straggler.as_ref().map_or(1.0, |s| s.factor)
}

fn summarize(cfg: &RunConfig, out: &RunOutput) -> SweepRow {
    let ratios = measure_sync_ratio(&out.trace, out.params.len());
    let sync_fraction = if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().map(|r| r.sync_fraction()).sum::<f64>() / ratios.len() as f64
    };
    SweepRow {
        run_id: cfg.run_id(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        algorithm: cfg.algorithm,
        slowdown: slowdown_of(cfg),
        section_length: cfg.section_length,
        status: out.status.name().into(),
        time_to_threshold: out.threshold.as_ref().map(|h| h.time),
        iterations_to_threshold: out.threshold.as_ref().map(|h| h.iteration),
        end_time: out.end_time,
        sync_fraction,
        groups: out.collectives,
        conflict_rate: out.stats.as_ref().map(|s| s.conflict_rate()),
        speedup: None,
        time_std: None,
    }
}

fn run_one(cfg: &RunConfig) -> Result<SweepRow, SweepError> {
    let mut setup = cfg.build()?;
    setup.record_trace = true;
    let out = run_simulated(&setup).map_err(|source| SweepError::Run {
        run_id: cfg.run_id(),
        source,
    })?;
    Ok(summarize(cfg, &out))
}

/// Run every point of the grid (in parallel), then fill in speedups against
/// the homogeneous baseline algorithm and per-cell spread over seeds.
pub fn run_sweep(base: &RunConfig) -> Result<Vec<SweepRow>, SweepError> {
    let axes: SweepAxes = base.sweep.clone().unwrap_or_default();
    let runs = expand(base);
    let mut rows: Vec<SweepRow> = runs.par_iter().map(run_one).collect::<Result<_, _>>()?;

    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = runs.iter().map(|c| c.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let baseline_runs: Vec<RunConfig> = seeds
        .iter()
        .map(|&seed| {
            let mut cfg = variant(base, axes.baseline, Some(1.0), 1, seed);
            cfg.straggler = None;
            cfg.profile.slowdown.clear();
            cfg
        })
        .collect();
    let baseline: Vec<SweepRow> = baseline_runs.par_iter().map(run_one).collect::<Result<_, _>>()?;
    let times: Vec<f64> = baseline.iter().filter_map(|r| r.time_to_threshold).collect();
    let baseline_time =
        (times.len() == baseline.len() && !times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64);

    let cell = |r: &SweepRow| (r.algorithm, r.slowdown.to_bits(), r.section_length);
    let spreads: Vec<Option<f64>> = rows
        .iter()
        .map(|r| {
            let t: Vec<f64> = rows
                .iter()
                .filter(|o| cell(o) == cell(r))
                .filter_map(|o| o.time_to_threshold)
                .collect();
            (t.len() >= 2).then(|| {
                let mean = t.iter().sum::<f64>() / t.len() as f64;
                (t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t.len() - 1) as f64).sqrt()
            })
        })
        .collect();
    for (r, spread) in rows.iter_mut().zip(spreads) {
        r.time_std = spread;
        r.speedup = match (baseline_time, r.time_to_threshold) {
            (Some(b), Some(t)) if t > 0.0 => Some(b / t),
            _ => None,
        };
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), SweepError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

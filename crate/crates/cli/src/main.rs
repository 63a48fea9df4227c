use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hetsync::analyze::analyze;
use hetsync::config::{ConfigError, RunConfig, ScheduleConfig, SpectralConfig};
use hetsync::model::evaluate_loss;
use hetsync::sim::Trace;
use hetsync::sweep::{run_sweep, write_csv, SweepError};
use hetsync::trainer::{
    max_pairwise_distance, measure_sync_ratio, run_simulated, run_threaded, write_trajectory_csv, RunOutput, RunStatus,
    ThreadOptions, TrainError,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "hetsync", version, about = "Decentralized training simulator and runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training job and write trajectory, trace and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Backend::Sim)]
        backend: Backend,
    },
    /// Run the grid in the config's [sweep] section and write a CSV table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Override the base seed (ignored when the sweep has a seed axis).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check a JSONL trace for atomicity, ordering and deadlocks.
    Analyze {
        trace: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the spectral gap of a synchronization policy.
    Spectral {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a static schedule for conflicts and connectivity.
    ValidateSchedule {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Backend {
    Sim,
    Threads,
}

/// Reported when a check finds a broken invariant.
#[derive(Debug)]
struct Violation(String);

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Violation {}

/// Failed run whose outputs were still written.
#[derive(Debug)]
struct RunFailed(String);

impl std::fmt::Display for RunFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for RunFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Violation>() {
            return 3;
        }
        if cause.is::<ConfigError>() || matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::Config(_))) {
            return 2;
        }
        if let Some(SweepError::Config(_)) = cause.downcast_ref::<SweepError>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out,
            backend,
        } => train(&config, seed, &out, backend),
        Command::Sweep { config, seed, out } => sweep(&config, seed, &out),
        Command::Analyze { trace, out } => analyze_trace(&trace, out.as_deref()),
        Command::Spectral { config, seed, out } => spectral(&config, seed, out.as_deref()),
        Command::ValidateSchedule { config } => validate_schedule(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_run_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn train(config: &Path, seed: Option<u64>, out: &Path, backend: Backend) -> Result<()> {
    let cfg = load_run_config(config, seed)?;
    let setup = cfg.build()?;
    let run_id = cfg.run_id();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let result = match backend {
        Backend::Sim => run_simulated(&setup),
        Backend::Threads => run_threaded(&setup, ThreadOptions::default()),
    };
    let output = match result {
        Ok(o) => o,
        Err(TrainError::Aborted { reason, partial }) => {
            write_trajectory_csv(&partial.trajectory, &run_id, create(&out.join("trajectory.csv"))?)?;
            return Err(RunFailed(format!("run aborted: {reason}")).into());
        }
        Err(e) => return Err(e.into()),
    };
    write_trajectory_csv(&output.trajectory, &run_id, create(&out.join("trajectory.csv"))?)?;
    if backend == Backend::Sim && setup.record_trace {
        let mut w = create(&out.join("trace.jsonl"))?;
        for e in &output.trace {
            let mut v = serde_json::to_value(e)?;
            v["run_id"] = json!(run_id);
            serde_json::to_writer(&mut w, &v)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let summary = summary(&cfg, &setup, &output, backend)?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!(
        "{run_id}: {} after {} s, final loss {:.6}",
        output.status.name(),
        output.end_time,
        summary["final_loss"].as_f64().unwrap_or(f64::NAN)
    );
    if let RunStatus::Deadlock { waits } = &output.status {
        return Err(RunFailed(format!("deadlock: {}", serde_json::to_string(waits)?)).into());
    }
    Ok(())
}

fn summary(
    cfg: &RunConfig,
    setup: &hetsync::trainer::TrainSetup,
    output: &RunOutput,
    backend: Backend,
) -> Result<serde_json::Value> {
    let losses = output
        .final_params
        .iter()
        .map(|p| evaluate_loss(&setup.model, p, &setup.eval_set))
        .collect::<Result<Vec<f64>, _>>()?;
    let ratios = if backend == Backend::Sim {
        measure_sync_ratio(&output.trace, setup.workers())
    } else {
        Vec::new()
    };
    Ok(json!({
        "run_id": cfg.run_id(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "algorithm": cfg.algorithm,
        "backend": format!("{backend:?}").to_lowercase(),
        "workers": setup.workers(),
        "status": output.status.name(),
        "end_time": output.end_time,
        "iterations": output.iterations,
        "threshold": output.threshold,
        "collectives": output.collectives,
        "final_loss": losses.first(),
        "mean_final_loss": losses.iter().sum::<f64>() / losses.len() as f64,
        "max_pairwise_distance": max_pairwise_distance(&output.params),
        "max_pairwise_distance_after_cooldown": output.max_pairwise_distance(),
        "coordinator": output.stats,
        "conflict_rate": output.stats.as_ref().map(|s| s.conflict_rate()),
        "sync_ratios": ratios,
    }))
}

fn sweep(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_run_config(config, seed)?;
    let rows = run_sweep(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("sweep.csv");
    write_csv(&rows, create(&path)?)?;
    println!("{} runs written to {}", rows.len(), path.display());
    Ok(())
}

fn analyze_trace(trace: &Path, out: Option<&Path>) -> Result<()> {
    let file = File::open(trace).with_context(|| format!("opening {}", trace.display()))?;
    let events = Trace::read_jsonl(BufReader::new(file))?.into_events();
    let report = analyze(&events);
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    if !report.is_clean() {
        return Err(Violation(format!("{} invariant violations", report.violations())).into());
    }
    Ok(())
}

fn spectral(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut cfg = SpectralConfig::from_path(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = cfg
        .policy
        .analyze(cfg.samples, cfg.seed)
        .map_err(|e| ConfigError::field("policy", e.to_string()))?;
    let text = serde_json::to_string_pretty(&json!({
        "policy": cfg.policy,
        "seed": cfg.seed,
        "report": report,
    }))?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn validate_schedule(config: &Path) -> Result<()> {
    let cfg = ScheduleConfig::from_path(config)?;
    let rule = cfg.build()?;
    rule.validate_conflict_free().map_err(|v| Violation(v.to_string()))?;
    if !rule.cycle_connected() {
        return Err(Violation("one cycle of the schedule does not connect all workers".into()).into());
    }
    println!(
        "ok: {} workers, {} phases, conflict-free and connected over one cycle",
        rule.workers(),
        rule.cycle_len()
    );
    Ok(())
}

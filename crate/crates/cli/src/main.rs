//! `cas`: command-line front end for running and inspecting CAS experiments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cas_core::curricula::{save_gm_file, stream_json, synthetic_class_fixture, Nuisance};
use cas_core::dynamics::{bulk_points, fp_residual, integrate_sde, movie_frames};
use cas_core::harness::{
    fifo_baseline, sweep, write_run, write_sweep, RunConfig, RunResult, Runner, Snapshot,
};
use cas_core::metrics::records_csv;
use cas_core::{CasError, Result};

#[derive(Parser)]
#[command(name = "cas", version, about = "Compress-add-smooth memory experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed for every random draw; required when the stream is random.
    #[arg(long)]
    seed: Option<u64>,
    /// Segment budget, overriding the config.
    #[arg(long = "L")]
    segments: Option<usize>,
    /// Number of days, overriding the config.
    #[arg(long)]
    days: Option<usize>,
    /// Half-life threshold, overriding the config.
    #[arg(long)]
    theta: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write records, age curve and summary.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value of a config field.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mixture frames along the protocol of a given day, optionally with SDE paths.
    Movie {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frames: usize,
        /// Day whose protocol is rendered (default: last day).
        #[arg(long)]
        day: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also integrate the replay SDE and write paths to this CSV.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        paths: usize,
        #[arg(long, default_value_t = 400)]
        steps: usize,
    },
    /// Fokker-Planck residual of the reconstructed drift at bulk points.
    DriftCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        t: Vec<f64>,
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long)]
        day: Option<usize>,
    },
    /// FIFO reference memory with the same stream and budget.
    Fifo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run to a day and save the memory.
    Snapshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        day: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a saved memory to the end of the stream.
    Restore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the generated daily targets as JSON.
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic class-conditional fixture mixture.
    Fixture {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&c.config)?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| CasError::Config(e.to_string()))?;
    let mut cfg = RunConfig::from_json(&text)?;
    let random = matches!(cfg.stream.nuisance, Nuisance::RandomWalk { .. });
    if random && c.seed.is_none() && raw.get("seed").is_none() {
        return Err(CasError::Config("this stream is random: pass --seed".into()));
    }
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(l) = c.segments {
        cfg.segments = l;
    }
    if let Some(n) = c.days {
        cfg.stream.n_days = n;
    }
    if let Some(theta) = c.theta {
        cfg.theta = theta;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn report(result: &RunResult, out: Option<&Path>) -> Result<()> {
    match out {
        Some(dir) => write_run(result, dir),
        None => emit(None, &serde_json::to_string_pretty(&result.summary)?),
    }
}

/// Runs to `day` (or the end) and returns the runner.
fn run_until(cfg: RunConfig, day: Option<usize>) -> Result<Runner> {
    let mut runner = Runner::new(cfg)?;
    let last = runner.targets().len();
    let day = day.unwrap_or(last);
    if day == 0 || day > last {
        return Err(CasError::OutOfRange(format!("day must be in 1..={last}, got {day}")));
    }
    while runner.day() < day {
        runner.step()?;
    }
    Ok(runner)
}

fn cmd_run(cfg: RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.or_else(|| cfg.outputs.dir.clone());
    let every = cfg.snapshot_every;
    let mut runner = Runner::new(cfg)?;
    let outcome = runner.run_with(|r| {
        if let (Some(k), Some(dir)) = (every, dir.as_deref()) {
            if r.day() % k == 0 {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("snapshot_day{}.json", r.day()));
                cas_core::harness::snapshot(r.state().expect("stepped"), &path)?;
            }
        }
        Ok(())
    });
    if let Err(e) = outcome {
        // Keep whatever was computed before the failure.
        if let Some(dir) = dir.as_deref() {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("records.partial.csv"), records_csv(runner.records()))?;
        }
        return Err(e);
    }
    report(&runner.finish(), dir.as_deref())
}

fn cmd_movie(
    cfg: RunConfig,
    frames: usize,
    day: Option<usize>,
    out: Option<PathBuf>,
    traj: Option<PathBuf>,
    paths: usize,
    steps: usize,
) -> Result<()> {
    let seed = cfg.seed;
    let runner = run_until(cfg, day)?;
    let grid = runner.state().expect("at least one day").grid();
    let gms = movie_frames(grid, frames)?;
    emit(out.as_deref(), &serde_json::to_string_pretty(&gms)?)?;
    if let Some(path) = traj {
        let run = integrate_sde(grid, paths, steps, seed)?;
        let d = grid.dim();
        let mut csv = String::from("path_id,step,t");
        for i in 0..d {
            write!(csv, ",x_{i}").expect("string write");
        }
        csv.push('\n');
        for tr in &run.trajectories {
            for (step, (t, x)) in tr.times.iter().zip(&tr.states).enumerate() {
                write!(csv, "{},{},{:.16e}", tr.path_id, step, t).expect("string write");
                for v in x.iter() {
                    write!(csv, ",{v:.16e}").expect("string write");
                }
                csv.push('\n');
            }
        }
        std::fs::write(path, csv)?;
        if run.failed() > 0 || run.clamped > 0 {
            eprintln!("sde: {} failed paths, {} clamped drift evaluations", run.failed(), run.clamped);
        }
    }
    Ok(())
}

fn cmd_drift_check(cfg: RunConfig, ts: Vec<f64>, points: usize, day: Option<usize>) -> Result<()> {
    let seed = cfg.seed;
    let runner = run_until(cfg, day)?;
    let grid = runner.state().expect("at least one day").grid();
    let mut rows = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let pts = bulk_points(grid, t, points, seed.wrapping_add(i as u64))?;
        rows.push(fp_residual(grid, t, &pts)?);
    }
    let worst = rows.iter().map(|r| r.relative).fold(0.0, f64::max);
    let doc = json!({ "day": runner.day(), "max_relative": worst, "residuals": rows });
    emit(None, &serde_json::to_string_pretty(&doc)?)
}

fn cmd_restore(cfg: RunConfig, snap: &Path, out: Option<PathBuf>) -> Result<()> {
    let snap = cas_core::harness::restore(snap)?;
    let mut runner = Runner::resume(cfg, &snap)?;
    runner.run_with(|_| Ok(()))?;
    let csv = records_csv(runner.records());
    match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("records.csv"), csv)?;
            cas_core::harness::snapshot(runner.state().expect("restored"), &dir.join("snapshot_final.json"))
        }
        None => emit(None, csv.trim_end()),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { common, out } => cmd_run(load_config(&common)?, out),
        Command::Sweep { common, axis, values, out } => {
            if values.is_empty() {
                return Err(CasError::Config("--values is empty".into()));
            }
            let table = sweep(&load_config(&common)?, &axis, &values)?;
            match out {
                Some(dir) => write_sweep(&table, &dir),
                None => emit(None, &serde_json::to_string_pretty(&table)?),
            }
        }
        Command::Movie { common, frames, day, out, trajectories, paths, steps } => {
            cmd_movie(load_config(&common)?, frames, day, out, trajectories, paths, steps)
        }
        Command::DriftCheck { common, t, points, day } => cmd_drift_check(load_config(&common)?, t, points, day),
        Command::Fifo { common, out } => report(&fifo_baseline(&load_config(&common)?)?, out.as_deref()),
        Command::Snapshot { common, day, out } => {
            let runner = run_until(load_config(&common)?, Some(day))?;
            std::fs::write(out, Snapshot::of(runner.state().expect("stepped")).to_json()?)?;
            Ok(())
        }
        Command::Restore { common, snapshot, out } => cmd_restore(load_config(&common)?, &snapshot, out),
        Command::Stream { common, out } => {
            let targets = load_config(&common)?.stream.generate()?;
            emit(out.as_deref(), &stream_json(&targets)?)
        }
        Command::Fixture { seed, out } => save_gm_file(&synthetic_class_fixture(seed), &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

//! Experiment orchestration: configuration, the day loop with incremental
//! forgetting records, sweeps, capacity fits and the FIFO reference memory.

mod export;
mod snapshot;

pub use export::{read_summary, write_run, write_sweep, RUN_FILES};
pub use snapshot::{restore, snapshot, snapshot_real_count, Snapshot, SNAPSHOT_VERSION};

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curricula::{Nuisance, StreamConfig};
use crate::error::{CasError, Result};
use crate::gm::{GaussianMixture, Moments};
use crate::metrics::{
    age_curve, amnesia_baseline, amnesia_baseline_from_moments, channel_shares, day_records,
    decomposed_forgetting, half_life, AgeCurve, Decomposition, ForgettingRecord, DEFAULT_THETA,
};
use crate::protocol::{memory_footprint, MemoryState};

/// Starting distribution of the memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PriorSpec {
    /// `K` equal-weight copies of `N(0, I_d)`, with `K` and `d` taken from the stream.
    #[default]
    Standard,
    File { path: PathBuf },
    Inline { gm: GaussianMixture },
}

impl PriorSpec {
    pub fn resolve(&self, k: usize, d: usize) -> Result<GaussianMixture> {
        let gm = match self {
            PriorSpec::Standard => GaussianMixture::standard(k, d)?,
            PriorSpec::File { path } => crate::curricula::load_gm_file(path)?,
            PriorSpec::Inline { gm } => {
                gm.validate()?;
                gm.clone()
            }
        };
        if gm.k() != k || gm.dim() != d {
            return Err(CasError::Mismatch(format!(
                "prior has K={}, d={} but the stream has K={k}, d={d}",
                gm.k(),
                gm.dim()
            )));
        }
        Ok(gm)
    }
}

/// Reference moments of "no memory" used to normalize forgetting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AmnesiaSpec {
    /// The prior's overall moments.
    #[default]
    Prior,
    /// A point mass at `x0` (zero covariance).
    Deterministic { x0: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Outputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

fn default_segments() -> usize {
    10
}
fn default_theta() -> f64 {
    DEFAULT_THETA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stream: StreamConfig,
    #[serde(rename = "L", default = "default_segments")]
    pub segments: usize,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub amnesia: AmnesiaSpec,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
    /// Seed for every random draw outside the stream (SDE paths, bulk points).
    #[serde(default)]
    pub seed: u64,
    /// Per-component decomposition; defaults to on for `K > 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decompose: Option<bool>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::new(StreamConfig::circular(), 10)
    }
}

impl RunConfig {
    pub fn new(stream: StreamConfig, segments: usize) -> Self {
        Self {
            stream,
            segments,
            prior: PriorSpec::Standard,
            amnesia: AmnesiaSpec::Prior,
            theta: DEFAULT_THETA,
            outputs: Outputs::default(),
            snapshot_every: None,
            seed: 0,
            decompose: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CasError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(CasError::Config("L must be at least 1".into()));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(CasError::Config(format!("theta must be in (0, 1), got {}", self.theta)));
        }
        if self.snapshot_every == Some(0) {
            return Err(CasError::Config("snapshot_every must be positive".into()));
        }
        self.stream.validate()
    }

    /// Sets the stream seed and the run seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let Nuisance::RandomWalk { speed, .. } = self.stream.nuisance {
            self.stream.nuisance = Nuisance::RandomWalk { speed, seed };
        }
        self
    }

    /// Copy with one named field set. Axis names: `L`, `P`, `K`, `d`, `r`,
    /// `R`, `A`, `n_days`, `cov_scale`, `theta`, `nuisance_speed`.
    pub fn with_axis(&self, axis: &str, value: f64) -> Result<Self> {
        let mut c = self.clone();
        let count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(CasError::Config(format!("axis {axis} needs a whole number, got {v}")))
            }
        };
        match axis {
            "L" => c.segments = count(value)?,
            "P" => c.stream.period = Some(value),
            "K" => c.stream.k = Some(count(value)?),
            "d" => c.stream.d = Some(count(value)?),
            "r" => c.stream.offset = value,
            "R" => c.stream.radius = value,
            "A" => c.stream.amplitude = value,
            "n_days" => c.stream.n_days = count(value)?,
            "cov_scale" => c.stream.cov_scale = Some(value),
            "theta" => c.theta = value,
            "nuisance_speed" => {
                let seed = match c.stream.nuisance {
                    Nuisance::RandomWalk { seed, .. } => seed,
                    Nuisance::None => c.seed,
                };
                c.stream.nuisance = Nuisance::RandomWalk { speed: value, seed };
            }
            other => return Err(CasError::Config(format!("unknown sweep axis `{other}`"))),
        }
        c.validate()?;
        Ok(c)
    }
}

/// Headline numbers of a run, all recomputable from its records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub half_life: Option<usize>,
    pub theta: f64,
    #[serde(rename = "max_Fbar")]
    pub max_fbar: Option<f64>,
    #[serde(rename = "max_Fbar_age")]
    pub max_fbar_age: Option<usize>,
    pub mean_share: Option<f64>,
    pub cov_share: Option<f64>,
    pub weight_share: Option<f64>,
    /// `exp(-a_half / L)`.
    pub t_star: Option<f64>,
    #[serde(rename = "L")]
    pub segments: usize,
    pub n_days: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub skipped_records: usize,
    pub memory_footprint: usize,
}

impl Summary {
    pub fn from_records(records: &[ForgettingRecord], theta: f64, segments: usize, k: usize, d: usize) -> Self {
        let curve = age_curve(records);
        let hl = half_life(&curve, theta);
        let max = curve.max();
        let shares = channel_shares(records);
        Summary {
            half_life: hl,
            theta,
            max_fbar: max.map(|m| m.1),
            max_fbar_age: max.map(|m| m.0),
            mean_share: shares.map(|s| s.mean),
            cov_share: shares.map(|s| s.cov),
            weight_share: shares.map(|s| s.weight),
            t_star: hl.map(|a| (-(a as f64) / segments as f64).exp()),
            segments,
            n_days: records.iter().map(|r| r.n).max().unwrap_or(0),
            k,
            d,
            skipped_records: curve.skipped,
            memory_footprint: memory_footprint(segments, k, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub config: RunConfig,
    pub records: Vec<ForgettingRecord>,
    pub age_curve: AgeCurve,
    pub half_life: Option<usize>,
    pub summary: Summary,
}

impl RunResult {
    fn from_records(config: RunConfig, records: Vec<ForgettingRecord>, k: usize, d: usize) -> Self {
        let summary = Summary::from_records(&records, config.theta, config.segments, k, d);
        RunResult {
            age_curve: age_curve(&records),
            half_life: summary.half_life,
            summary,
            records,
            config,
        }
    }
}

/// Day-by-day driver. Records for day `n` are computed right after day `n`
/// is incorporated, from replays of the live grid.
pub struct Runner {
    config: RunConfig,
    targets: Vec<GaussianMixture>,
    baselines: Vec<f64>,
    prior: GaussianMixture,
    state: Option<MemoryState>,
    records: Vec<ForgettingRecord>,
    decompose: bool,
}

impl Runner {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let targets = config.stream.generate()?;
        let (k, d) = (targets[0].k(), targets[0].dim());
        let prior = config.prior.resolve(k, d)?;
        let baselines = baselines(&config.amnesia, &prior, &targets)?;
        let decompose = config.decompose.unwrap_or(k > 1);
        Ok(Self { config, targets, baselines, prior, state: None, records: Vec::new(), decompose })
    }

    /// Continues from a restored memory; the stream is regenerated from the
    /// config and must agree with the snapshot's prior.
    pub fn resume(config: RunConfig, snap: &Snapshot) -> Result<Self> {
        let mut runner = Self::new(config)?;
        if snap.segments != runner.config.segments {
            return Err(CasError::Schema(format!(
                "snapshot has L={} but the config has L={}",
                snap.segments, runner.config.segments
            )));
        }
        if snap.day > runner.targets.len() {
            return Err(CasError::Schema(format!(
                "snapshot is at day {} but the stream has {} days",
                snap.day,
                runner.targets.len()
            )));
        }
        if snap.prior != runner.prior {
            return Err(CasError::Schema("snapshot prior differs from the configured prior".into()));
        }
        runner.state = Some(snapshot::into_state(snap, runner.targets[..snap.day].to_vec())?);
        Ok(runner)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn targets(&self) -> &[GaussianMixture] {
        &self.targets
    }

    pub fn prior(&self) -> &GaussianMixture {
        &self.prior
    }

    pub fn state(&self) -> Option<&MemoryState> {
        self.state.as_ref()
    }

    pub fn day(&self) -> usize {
        self.state.as_ref().map_or(0, MemoryState::day)
    }

    pub fn records(&self) -> &[ForgettingRecord] {
        &self.records
    }

    pub fn is_done(&self) -> bool {
        self.day() >= self.targets.len()
    }

    /// Incorporates the next day and appends its records. Returns `false`
    /// once the stream is exhausted.
    pub fn step(&mut self) -> Result<bool> {
        let day = self.day();
        if day >= self.targets.len() {
            return Ok(false);
        }
        let target = self.targets[day].clone();
        match self.state.as_mut() {
            None => {
                self.state = Some(MemoryState::new(self.prior.clone(), target, self.config.segments)?)
            }
            Some(st) => st.incorporate(target)?,
        }
        let st = self.state.as_ref().expect("state was just set");
        self.records.extend(day_records(st, &self.baselines, self.decompose)?);
        Ok(true)
    }

    /// Steps until the stream ends, calling `on_day` after every day.
    pub fn run_with<F: FnMut(&Runner) -> Result<()>>(&mut self, mut on_day: F) -> Result<()> {
        while self.step()? {
            on_day(self)?;
        }
        Ok(())
    }

    pub fn finish(self) -> RunResult {
        let (k, d) = (self.prior.k(), self.prior.dim());
        RunResult::from_records(self.config, self.records, k, d)
    }
}

fn baselines(amnesia: &AmnesiaSpec, prior: &GaussianMixture, targets: &[GaussianMixture]) -> Result<Vec<f64>> {
    match amnesia {
        AmnesiaSpec::Prior => targets.iter().map(|q| amnesia_baseline(prior, q)).collect(),
        AmnesiaSpec::Deterministic { x0 } => {
            let d = prior.dim();
            if x0.len() != d {
                return Err(CasError::Config(format!("x0 has {} entries, d = {d}", x0.len())));
            }
            let reference = Moments { mean: DVector::from_column_slice(x0), cov: DMatrix::zeros(d, d) };
            targets.iter().map(|q| amnesia_baseline_from_moments(&reference, q)).collect()
        }
    }
}

/// Generate, run the recursion, score every `(m, n)` pair and summarize.
pub fn run_experiment(config: &RunConfig) -> Result<RunResult> {
    let mut runner = Runner::new(config.clone())?;
    runner.run_with(|_| Ok(()))?;
    Ok(runner.finish())
}

/// FIFO reference: the last `L` days are replayed verbatim, older days are
/// replayed as the prior.
pub fn fifo_baseline(config: &RunConfig) -> Result<RunResult> {
    config.validate()?;
    let targets = config.stream.generate()?;
    let (k, d) = (targets[0].k(), targets[0].dim());
    let prior = config.prior.resolve(k, d)?;
    let base = baselines(&config.amnesia, &prior, &targets)?;
    let decompose = config.decompose.unwrap_or(k > 1);
    let l = config.segments;
    let mut records = Vec::with_capacity(targets.len() * (targets.len() + 1) / 2);
    for n in 1..=targets.len() {
        for m in 1..=n {
            let orig = &targets[m - 1];
            let (f_raw, decomposition) = if n - m < l {
                (0.0, decompose.then_some(Decomposition { mean: 0.0, cov: 0.0, weight: 0.0 }))
            } else {
                let dec = if decompose { Some(decomposed_forgetting(&prior, orig)?) } else { None };
                (crate::metrics::raw_forgetting(&prior, orig)?, dec)
            };
            let f_norm = crate::metrics::normalized_forgetting(f_raw, base[m - 1]).ok();
            records.push(ForgettingRecord { m, n, f_raw, f_norm, decomposition });
        }
    }
    Ok(RunResult::from_records(config.clone(), records, k, d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub summary: Summary,
}

/// Least-squares line `a_half = c L + b` and the implied `t* = exp(-c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capacity {
    pub c: f64,
    pub intercept: f64,
    pub t_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub rows: Vec<SweepRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<Capacity>,
}

/// One independent run per value, in parallel. A sweep over `L` also
/// reports the capacity fit.
pub fn sweep(base: &RunConfig, axis: &str, values: &[f64]) -> Result<SweepTable> {
    let configs = values.iter().map(|&v| base.with_axis(axis, v)).collect::<Result<Vec<_>>>()?;
    let rows = configs
        .par_iter()
        .zip(values)
        .map(|(cfg, &value)| Ok(SweepRow { value, summary: run_experiment(cfg)?.summary }))
        .collect::<Result<Vec<_>>>()?;
    let capacity = if axis == "L" {
        let pts: Vec<(usize, usize)> =
            rows.iter().filter_map(|r| r.summary.half_life.map(|h| (r.summary.segments, h))).collect();
        Some(capacity_diagnostics(&pts)?)
    } else {
        None
    };
    Ok(SweepTable { axis: axis.to_string(), rows, capacity })
}

/// Fits `a_half = c L + b` over `(L, a_half)` points.
pub fn capacity_diagnostics(points: &[(usize, usize)]) -> Result<Capacity> {
    if points.len() < 3 {
        return Err(CasError::DegenerateFit(format!("need at least 3 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 as f64 - my)).sum();
    if sxx == 0.0 {
        return Err(CasError::DegenerateFit("all points share the same L".into()));
    }
    let c = sxy / sxx;
    Ok(Capacity { c, intercept: my - c * mx, t_star: (-c).exp() })
}

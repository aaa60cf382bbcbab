//! Day-indexed target streams.
//!
//! Every generator is a pure function of its [`StreamConfig`]; the only
//! randomness (the nuisance walk) is seeded in the config. Days are numbered
//! from 1. The informative geometry lives in the first two coordinates; any
//! extra coordinates carry either zeros or the nuisance walk.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CasError, Result};
use crate::gm::GaussianMixture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Circular,
    Linear,
    Triangle,
    Crowding,
    Embedded,
    SplitMerge,
    RotatingDominance,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Nuisance {
    #[default]
    None,
    /// Independent Gaussian walk in every coordinate past the second, with
    /// per-day step standard deviation `speed`.
    RandomWalk { speed: f64, seed: u64 },
}

/// Phase schedule for the split-merge curriculum. `radii[p]` holds the
/// per-component offset radii of phase `p`; phase `p + 1` starts on day
/// `boundaries[p]` and is reached linearly over `ramp_days` days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMerge {
    pub boundaries: Vec<usize>,
    pub radii: Vec<Vec<f64>>,
    pub ramp_days: usize,
}

impl Default for SplitMerge {
    fn default() -> Self {
        Self {
            boundaries: vec![31, 51, 81],
            radii: vec![
                vec![0.8, 0.8, 0.8],
                vec![0.05, 0.05, 0.8],
                vec![0.8, 0.8, 0.8],
                vec![0.1, 0.1, 0.1],
            ],
            ramp_days: 5,
        }
    }
}

/// Stream description. Unset optional fields take kind-specific defaults
/// (see the accessor methods).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub kind: StreamKind,
    #[serde(default = "default_days")]
    pub n_days: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Radius of the centre's circular drift.
    #[serde(rename = "R", default = "default_radius")]
    pub radius: f64,
    /// Drift (or weight-rotation) period in days.
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_scale: Option<f64>,
    /// Component offset radius around the centre.
    #[serde(rename = "r", default = "default_offset")]
    pub offset: f64,
    /// Weight-rotation amplitude.
    #[serde(rename = "A", default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub nuisance: Nuisance,
    #[serde(default)]
    pub split_merge: SplitMerge,
    /// Fixed components for `rotating_dominance`; the synthetic class
    /// fixture is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_file: Option<PathBuf>,
    /// JSON array of per-day mixtures for `external`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub days_file: Option<PathBuf>,
    /// Seed of the synthetic class fixture.
    #[serde(default = "default_fixture_seed")]
    pub fixture_seed: u64,
}

fn default_days() -> usize {
    100
}
fn default_radius() -> f64 {
    2.0
}
fn default_offset() -> f64 {
    0.8
}
fn default_amplitude() -> f64 {
    2.0
}
fn default_fixture_seed() -> u64 {
    7
}

impl StreamConfig {
    pub fn new(kind: StreamKind) -> Self {
        Self {
            kind,
            n_days: default_days(),
            d: None,
            k: None,
            radius: default_radius(),
            period: None,
            cov_scale: None,
            offset: default_offset(),
            amplitude: default_amplitude(),
            nuisance: Nuisance::None,
            split_merge: SplitMerge::default(),
            base_file: None,
            days_file: None,
            fixture_seed: default_fixture_seed(),
        }
    }

    pub fn circular() -> Self {
        Self::new(StreamKind::Circular)
    }

    pub fn with_days(mut self, n: usize) -> Self {
        self.n_days = n;
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_dim(mut self, d: usize) -> Self {
        self.d = Some(d);
        self
    }

    pub fn with_period(mut self, p: f64) -> Self {
        self.period = Some(p);
        self
    }

    pub fn with_offset(mut self, r: f64) -> Self {
        self.offset = r;
        self
    }

    pub fn with_nuisance(mut self, n: Nuisance) -> Self {
        self.nuisance = n;
        self
    }

    /// Period with its kind default (30 for rotating dominance, 50 otherwise).
    pub fn period(&self) -> f64 {
        self.period.unwrap_or(match self.kind {
            StreamKind::RotatingDominance => 30.0,
            _ => 50.0,
        })
    }

    /// Component covariance scale (0.5 for single-blob streams, 0.3 for
    /// multi-component geometries).
    pub fn cov_scale(&self) -> f64 {
        self.cov_scale.unwrap_or(match self.kind {
            StreamKind::Circular | StreamKind::Linear => 0.5,
            _ => 0.3,
        })
    }

    /// Component count for the synthetic geometries.
    pub fn components(&self) -> usize {
        match self.kind {
            StreamKind::Circular | StreamKind::Linear => self.k.unwrap_or(1),
            _ => self.k.unwrap_or(3),
        }
    }

    pub fn dim(&self) -> usize {
        self.d.unwrap_or(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CasError::Config(m));
        if self.n_days == 0 {
            return bad("n_days must be at least 1".into());
        }
        if !(self.period() > 0.0) {
            return bad(format!("period must be positive, got {}", self.period()));
        }
        if !(self.cov_scale() > 0.0) {
            return bad(format!("cov_scale must be positive, got {}", self.cov_scale()));
        }
        let (k, d) = (self.components(), self.dim());
        match self.kind {
            StreamKind::Circular | StreamKind::Linear => {
                if k != 1 {
                    return bad(format!("{:?} streams have K = 1, got {k}", self.kind));
                }
                if self.kind == StreamKind::Circular && d < 2 {
                    return bad("circular streams need d >= 2".into());
                }
                if d < 1 {
                    return bad("d must be at least 1".into());
                }
            }
            StreamKind::Triangle | StreamKind::SplitMerge => {
                if k != 3 {
                    return bad(format!("{:?} streams have K = 3, got {k}", self.kind));
                }
                if d < 2 {
                    return bad("d must be at least 2".into());
                }
            }
            StreamKind::Crowding | StreamKind::Embedded => {
                if k == 0 || d < 2 {
                    return bad("crowding streams need K >= 1 and d >= 2".into());
                }
            }
            StreamKind::RotatingDominance | StreamKind::External => {}
        }
        if self.kind == StreamKind::SplitMerge {
            let sm = &self.split_merge;
            if sm.radii.len() != sm.boundaries.len() + 1 || sm.radii.iter().any(|r| r.len() != 3) {
                return bad("split_merge needs one more radius triple than boundaries".into());
            }
            if sm.boundaries.windows(2).any(|w| w[0] >= w[1]) || sm.ramp_days == 0 {
                return bad("split_merge boundaries must increase and ramp_days be positive".into());
            }
        }
        if let Nuisance::RandomWalk { speed, .. } = self.nuisance {
            if !(speed >= 0.0 && speed.is_finite()) {
                return bad(format!("nuisance speed must be non-negative, got {speed}"));
            }
        }
        Ok(())
    }

    /// Generates days `1..=n_days`.
    pub fn generate(&self) -> Result<Vec<GaussianMixture>> {
        self.validate()?;
        let days = 1..=self.n_days;
        let mut targets: Vec<GaussianMixture> = match self.kind {
            StreamKind::Circular => days.map(|m| circular_target(self, m)).collect::<Result<_>>()?,
            StreamKind::Linear => days.map(|m| linear_target(self, m)).collect::<Result<_>>()?,
            StreamKind::Triangle | StreamKind::Crowding | StreamKind::Embedded => {
                days.map(|m| ring_target(self, m, &vec![self.offset; self.components()]))
                    .collect::<Result<_>>()?
            }
            StreamKind::SplitMerge => days
                .map(|m| ring_target(self, m, &split_merge_radii(&self.split_merge, m)))
                .collect::<Result<_>>()?,
            StreamKind::RotatingDominance => {
                let base = match &self.base_file {
                    Some(p) => load_gm_file(p)?,
                    None => synthetic_class_fixture(self.fixture_seed),
                };
                rotating_dominance_stream(&base, self.amplitude, self.period(), self.n_days)?
            }
            StreamKind::External => {
                let path = self
                    .days_file
                    .as_ref()
                    .ok_or_else(|| CasError::Config("external streams need days_file".into()))?;
                let mut days = load_stream_file(path)?;
                if days.len() < self.n_days {
                    return Err(CasError::Config(format!(
                        "{} holds {} days, {} requested",
                        path.display(),
                        days.len(),
                        self.n_days
                    )));
                }
                days.truncate(self.n_days);
                days
            }
        };
        if let Nuisance::RandomWalk { speed, seed } = self.nuisance {
            add_nuisance_walk(&mut targets, speed, seed)?;
        }
        check_stream(&targets)?;
        Ok(targets)
    }
}

fn padded(d: usize, x: f64, y: f64) -> DVector<f64> {
    let mut v = DVector::zeros(d);
    v[0] = x;
    if d > 1 {
        v[1] = y;
    }
    v
}

/// `2 pi m / P` with `m` reduced modulo `P` first, so integer periods
/// repeat exactly.
fn phase(period: f64, m: usize) -> f64 {
    2.0 * PI * (m as f64).rem_euclid(period) / period
}

/// Centre of the circular drift on day `m`.
pub fn circle_centre(radius: f64, period: f64, m: usize) -> (f64, f64) {
    let th = phase(period, m);
    (radius * th.cos(), radius * th.sin())
}

/// Single blob circling the origin: `R (cos 2 pi m/P, sin 2 pi m/P, 0, ...)`.
pub fn circular_target(cfg: &StreamConfig, m: usize) -> Result<GaussianMixture> {
    let d = cfg.dim();
    let (x, y) = circle_centre(cfg.radius, cfg.period(), m);
    GaussianMixture::gaussian(padded(d, x, y), DMatrix::identity(d, d) * cfg.cov_scale())
}

/// Single blob moving along the first axis at the circular arc speed.
pub fn linear_target(cfg: &StreamConfig, m: usize) -> Result<GaussianMixture> {
    let d = cfg.dim();
    let v = 2.0 * PI * cfg.radius / cfg.period();
    GaussianMixture::gaussian(padded(d, v * m as f64, 0.0), DMatrix::identity(d, d) * cfg.cov_scale())
}

/// `K` equal-weight components at angles `2 pi m/P + 2 pi k/K` around the
/// drifting centre, component `k` at distance `radii[k]`.
pub fn ring_target(cfg: &StreamConfig, m: usize, radii: &[f64]) -> Result<GaussianMixture> {
    let (d, k) = (cfg.dim(), radii.len());
    let p = cfg.period();
    let (cx, cy) = circle_centre(cfg.radius, p, m);
    let means = radii
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let th = phase(p, m) + 2.0 * PI * i as f64 / k as f64;
            padded(d, cx + r * th.cos(), cy + r * th.sin())
        })
        .collect();
    let cov = DMatrix::identity(d, d) * cfg.cov_scale();
    GaussianMixture::new(vec![1.0 / k as f64; k], means, vec![cov; k])
}

/// Per-component radii on day `m`: each boundary starts a linear ramp from
/// the previous phase's radii to the next over `ramp_days` days.
pub fn split_merge_radii(sm: &SplitMerge, m: usize) -> Vec<f64> {
    let mut r = sm.radii[0].clone();
    for (p, &b) in sm.boundaries.iter().enumerate() {
        if m < b {
            break;
        }
        let f = (((m - b + 1) as f64) / sm.ramp_days as f64).min(1.0);
        let (from, to) = (&sm.radii[p], &sm.radii[p + 1]);
        // Ramps never overlap for the default schedule; if they did, the
        // later one starts from the earlier phase's end state.
        r = from.iter().zip(to).map(|(a, b)| a + f * (b - a)).collect();
    }
    r
}

/// Softmax weights `softmax(A cos(2 pi m/P + 2 pi k/K))`.
pub fn dominance_weights(k: usize, amplitude: f64, period: f64, m: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..k)
        .map(|i| amplitude * (phase(period, m) + 2.0 * PI * i as f64 / k as f64).cos())
        .collect();
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Fixed components with weights rotating through dominance, days `1..=n`.
pub fn rotating_dominance_stream(
    base: &GaussianMixture,
    amplitude: f64,
    period: f64,
    n_days: usize,
) -> Result<Vec<GaussianMixture>> {
    base.validate()?;
    (1..=n_days)
        .map(|m| {
            GaussianMixture::new(
                dominance_weights(base.k(), amplitude, period, m),
                base.means().to_vec(),
                base.covs().to_vec(),
            )
        })
        .collect()
}

/// Nuisance offset of every coordinate past the second on days `1..=n`:
/// coordinate `i` walks with its own ChaCha stream.
pub fn nuisance_walk(d: usize, n_days: usize, speed: f64, seed: u64) -> Vec<DVector<f64>> {
    let mut pos = DVector::zeros(d);
    let mut rngs: Vec<ChaCha8Rng> = (0..d)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    (0..n_days)
        .map(|_| {
            for (i, rng) in rngs.iter_mut().enumerate().skip(2) {
                pos[i] += speed * rng.sample::<f64, _>(StandardNormal);
            }
            pos.clone()
        })
        .collect()
}

/// Shifts every component of day `m` by the walk position on that day.
fn add_nuisance_walk(targets: &mut [GaussianMixture], speed: f64, seed: u64) -> Result<()> {
    let Some(first) = targets.first() else { return Ok(()) };
    let d = first.dim();
    let walk = nuisance_walk(d, targets.len(), speed, seed);
    for (t, shift) in targets.iter_mut().zip(walk) {
        let means = t.means().iter().map(|m| m + &shift).collect();
        *t = GaussianMixture::new(t.weights().to_vec(), means, t.covs().to_vec())?;
    }
    Ok(())
}

fn check_stream(targets: &[GaussianMixture]) -> Result<()> {
    let Some(first) = targets.first() else {
        return Err(CasError::Config("stream is empty".into()));
    };
    for (i, t) in targets.iter().enumerate() {
        if t.k() != first.k() || t.dim() != first.dim() {
            return Err(CasError::Mismatch(format!(
                "day {} has K={}, d={}; day 1 has K={}, d={}",
                i + 1,
                t.k(),
                t.dim(),
                first.k(),
                first.dim()
            )));
        }
    }
    Ok(())
}

/// Three well-separated components in `d = 12` with anisotropic covariances
/// `Q_k diag(3.0 .. 0.5) Q_k^T`, `Q_k` a random rotation. A stand-in for
/// class-conditional Gaussians fitted to real data.
pub fn synthetic_class_fixture(seed: u64) -> GaussianMixture {
    let (k, d) = (3, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = (0..k)
        .map(|i| {
            let mut m = DVector::zeros(d);
            m[i] = 2.0;
            m
        })
        .collect();
    let spectrum = DVector::from_fn(d, |i, _| 3.0 - 2.5 * i as f64 / (d - 1) as f64);
    let covs = (0..k)
        .map(|_| {
            let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let q = g.qr().q();
            &q * DMatrix::from_diagonal(&spectrum) * q.transpose()
        })
        .collect();
    GaussianMixture::new(vec![1.0 / 3.0; 3], means, covs).expect("fixture is a valid mixture")
}

/// Reads and validates one mixture from JSON.
pub fn load_gm_file(path: &Path) -> Result<GaussianMixture> {
    let text = std::fs::read_to_string(path)?;
    let gm: GaussianMixture = serde_json::from_str(&text)?;
    gm.validate()?;
    Ok(gm)
}

pub fn save_gm_file(gm: &GaussianMixture, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(gm)?)?;
    Ok(())
}

/// Reads a JSON array of mixtures, validating each.
pub fn load_stream_file(path: &Path) -> Result<Vec<GaussianMixture>> {
    let text = std::fs::read_to_string(path)?;
    let days: Vec<GaussianMixture> = serde_json::from_str(&text)?;
    for gm in &days {
        gm.validate()?;
    }
    check_stream(&days)?;
    Ok(days)
}

/// Stream dump: JSON array of per-day mixtures.
pub fn stream_json(targets: &[GaussianMixture]) -> Result<String> {
    Ok(serde_json::to_string(targets)?)
}

//! Replay dynamics: the drift of a unit-diffusion SDE whose marginals follow
//! the protocol's density path, plus numerical checks of that construction.
//!
//! On a segment the parameters move linearly, so each component is
//! transported by the affine velocity `m_dot + 0.5 S_dot S^-1 (x - m)`. The
//! resulting shape current accounts for moving and deforming components;
//! changing weights add the gradient of a Poisson potential `psi` with
//! `laplacian(psi) = sum_k pi_dot_k g_k`. The drift is
//! `(J_shape - grad psi) / p + 0.5 grad log p`.

mod quadrature;
mod sde;

pub use quadrature::integrate_unit;
pub use sde::{integrate_sde, sde_terminal_states, SdeRun, Trajectory};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CasError, Result};
use crate::gm::{GaussianMixture, PreparedMixture, DENSITY_FLOOR};
use crate::protocol::ProtocolGrid;

/// Relative tolerance for the Poisson quadrature.
pub const POISSON_REL_TOL: f64 = 1e-10;
const POISSON_ABS_TOL: f64 = 1e-300;
/// Time step for the finite-difference `dp/dt` in [`fp_residual`].
pub const FD_STEP_T: f64 = 1e-5;
/// Space step for the finite-difference divergence in [`fp_residual`].
pub const FD_STEP_X: f64 = 1e-4;

/// Mixture parameters at time `t` and their rates on the enclosing segment.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSlice {
    pub t: f64,
    pub gm: GaussianMixture,
    pub weight_rates: Vec<f64>,
    pub mean_rates: Vec<DVector<f64>>,
    pub cov_rates: Vec<DMatrix<f64>>,
}

impl PathSlice {
    pub fn has_weight_motion(&self) -> bool {
        self.weight_rates.iter().any(|&r| r != 0.0)
    }
}

/// Segment used for rates at `t`: right derivative at nodes, left at `t = 1`.
fn rate_segment(t: f64, segments: usize) -> usize {
    ((t * segments as f64).floor() as usize).min(segments - 1)
}

pub fn path_slice(grid: &ProtocolGrid, t: f64) -> Result<PathSlice> {
    let gm = grid.eval_at(t)?;
    let l = grid.segments();
    let j = rate_segment(t, l);
    let (a, b) = (&grid.nodes()[j], &grid.nodes()[j + 1]);
    let scale = l as f64;
    Ok(PathSlice {
        t,
        gm,
        weight_rates: a.weights().iter().zip(b.weights()).map(|(x, y)| (y - x) * scale).collect(),
        mean_rates: a.means().iter().zip(b.means()).map(|(x, y)| (y - x) * scale).collect(),
        cov_rates: a.covs().iter().zip(b.covs()).map(|(x, y)| (y - x) * scale).collect(),
    })
}

struct ComponentField {
    mean: DVector<f64>,
    mean_rate: DVector<f64>,
    weight_rate: f64,
    /// `0.5 S_dot S^-1`.
    shape_gain: DMatrix<f64>,
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
}

/// Drift and drift ingredients at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftEval {
    pub drift: DVector<f64>,
    pub density: f64,
    /// The density fell below the floor and was clamped in the division.
    pub clamped: bool,
}

/// A [`PathSlice`] with everything needed for repeated drift evaluation.
pub struct SliceField {
    prepared: PreparedMixture,
    components: Vec<ComponentField>,
    has_weight_motion: bool,
    rel_tol: f64,
}

impl SliceField {
    pub fn new(slice: &PathSlice) -> Result<Self> {
        Self::with_tolerance(slice, POISSON_REL_TOL)
    }

    pub fn with_tolerance(slice: &PathSlice, rel_tol: f64) -> Result<Self> {
        let prepared = slice.gm.prepare()?;
        let components = (0..slice.gm.k())
            .map(|k| {
                let cov = &slice.gm.covs()[k];
                let eig = SymmetricEigen::new(cov.clone());
                ComponentField {
                    mean: slice.gm.means()[k].clone(),
                    mean_rate: slice.mean_rates[k].clone(),
                    weight_rate: slice.weight_rates[k],
                    shape_gain: &slice.cov_rates[k] * &prepared.precisions()[k] * 0.5,
                    eigvals: eig.eigenvalues,
                    eigvecs: eig.eigenvectors,
                }
            })
            .collect();
        Ok(Self { prepared, components, has_weight_motion: slice.has_weight_motion(), rel_tol })
    }

    pub fn density(&self, x: &DVector<f64>) -> f64 {
        self.prepared.density(x)
    }

    fn velocity(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        let c = &self.components[k];
        &c.mean_rate + &c.shape_gain * (x - &c.mean)
    }

    /// `sum_k pi_k g_k(x) (m_dot_k + 0.5 S_dot_k S_k^-1 (x - m_k))`.
    pub fn shape_current(&self, x: &DVector<f64>) -> DVector<f64> {
        let wd = self.prepared.weighted_component_densities(x);
        let mut j = DVector::zeros(x.len());
        for (k, w) in wd.iter().enumerate() {
            if *w > 0.0 {
                j.axpy(*w, &self.velocity(k, x), 1.0);
            }
        }
        j
    }

    /// Gradient of the Poisson potential; zero when no weight moves.
    pub fn poisson_psi_grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(x.len());
        if !self.has_weight_motion {
            return Ok(g);
        }
        for c in self.components.iter().filter(|c| c.weight_rate != 0.0) {
            let z = c.eigvecs.transpose() * (x - &c.mean);
            let grad = heat_kernel_integral(&c.eigvals, &z, true, self.rel_tol)?;
            g.axpy(c.weight_rate, &(&c.eigvecs * DVector::from_vec(grad)), 1.0);
        }
        Ok(g)
    }

    /// Poisson potential itself, up to an additive constant.
    pub fn poisson_psi(&self, x: &DVector<f64>) -> Result<f64> {
        let mut psi = 0.0;
        for c in self.components.iter().filter(|c| c.weight_rate != 0.0) {
            let z = c.eigvecs.transpose() * (x - &c.mean);
            psi += c.weight_rate * heat_kernel_integral(&c.eigvals, &z, false, self.rel_tol)?[0];
        }
        Ok(psi)
    }

    pub fn drift(&self, x: &DVector<f64>) -> Result<DriftEval> {
        self.drift_impl(x, self.has_weight_motion)
    }

    /// Drift with the Poisson term left out, exact when no weight moves.
    pub fn drift_without_poisson(&self, x: &DVector<f64>) -> Result<DriftEval> {
        self.drift_impl(x, false)
    }

    fn drift_impl(&self, x: &DVector<f64>, poisson: bool) -> Result<DriftEval> {
        let resp = self.prepared.responsibilities(x);
        let density = self.prepared.density(x);
        let mut drift = DVector::zeros(x.len());
        // J_shape / p through the responsibilities keeps the tails finite.
        for (k, r) in resp.iter().enumerate() {
            if *r > 0.0 {
                drift.axpy(*r, &self.velocity(k, x), 1.0);
            }
        }
        let score = self.prepared.score(x);
        drift.axpy(0.5, &score.grad, 1.0);
        if poisson {
            let gpsi = self.poisson_psi_grad(x)?;
            drift.axpy(-1.0 / density.max(DENSITY_FLOOR), &gpsi, 1.0);
        }
        if drift.iter().any(|v| !v.is_finite()) {
            return Err(CasError::NonFinite(format!("drift at x = {:?}", x.as_slice())));
        }
        Ok(DriftEval { drift, density, clamped: density < DENSITY_FLOOR })
    }
}

/// `int_0^inf h(s) ds` with `h` built from `N(z; 0, diag(lambda) + 2 s I)`.
///
/// With `gradient`, returns the vector `int (lambda + 2s)^-1 z N ds`. Without,
/// returns `-int [N - N(0; 0, ...)] ds`, a potential whose Laplacian is the
/// Gaussian itself and which stays finite in every dimension.
/// The map `s = lambda_max (u / (1 - u))^2` sends `[0, 1)` onto `[0, inf)`
/// and keeps the integrand bounded at `u = 1` for `d >= 1`.
fn heat_kernel_integral(lambda: &DVector<f64>, z: &DVector<f64>, gradient: bool, rel_tol: f64) -> Result<Vec<f64>> {
    let d = lambda.len();
    let lmax = lambda.max();
    let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    let dim = if gradient { d } else { 1 };
    integrate_unit(
        |u, out| {
            let v = u / (1.0 - u);
            let s = lmax * v * v;
            let jac = 2.0 * lmax * v / ((1.0 - u) * (1.0 - u));
            if !jac.is_finite() || jac == 0.0 {
                return;
            }
            let mut q = 0.0;
            let mut log_det = 0.0;
            for i in 0..d {
                let a = lambda[i] + 2.0 * s;
                q += z[i] * z[i] / a;
                log_det += a.ln();
            }
            let n0 = (log_norm - 0.5 * log_det).exp();
            if gradient {
                let w = n0 * (-0.5 * q).exp() * jac;
                for i in 0..d {
                    out[i] += w * z[i] / (lambda[i] + 2.0 * s);
                }
            } else {
                out[0] -= n0 * (-0.5 * q).exp_m1() * jac;
            }
        },
        dim,
        rel_tol,
        POISSON_ABS_TOL,
    )
}

/// `J_shape(x)` on a slice.
pub fn shape_current(slice: &PathSlice, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(SliceField::new(slice)?.shape_current(x))
}

/// `grad psi(x)` on a slice.
pub fn poisson_psi_grad(slice: &PathSlice, x: &DVector<f64>) -> Result<DVector<f64>> {
    SliceField::new(slice)?.poisson_psi_grad(x)
}

/// Drift of the replay SDE on a slice.
pub fn drift(slice: &PathSlice, x: &DVector<f64>) -> Result<DriftEval> {
    SliceField::new(slice)?.drift(x)
}

/// Points drawn from the path at `t` whose density is at least `1e-8` of the
/// largest density among the draws.
pub fn bulk_points(grid: &ProtocolGrid, t: f64, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let gm = grid.eval_at(t)?;
    let prepared = gm.prepare()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<DVector<f64>> = Vec::with_capacity(n);
    while pts.len() < n {
        pts.extend(gm.sample_with(&mut rng, n)?);
        let dens: Vec<f64> = pts.iter().map(|p| prepared.density(p)).collect();
        let peak = dens.iter().cloned().fold(0.0, f64::max);
        pts = pts.into_iter().zip(dens).filter(|(_, d)| *d >= 1e-8 * peak).map(|(p, _)| p).collect();
    }
    pts.truncate(n);
    Ok(pts)
}

/// Fokker-Planck residual statistics at one time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FpResidual {
    pub t: f64,
    /// `max |dp/dt + div J| / max(max |dp/dt|, 1e-6 max p)` over the points.
    pub relative: f64,
    pub max_abs: f64,
    pub max_dp_dt: f64,
    pub points: usize,
    pub clamped: usize,
}

/// Checks `dp/dt + div(s p - 0.5 grad p) = 0` at `pts`, with central
/// differences in time and space. `t` should be inside a segment.
pub fn fp_residual(grid: &ProtocolGrid, t: f64, pts: &[DVector<f64>]) -> Result<FpResidual> {
    let ht = FD_STEP_T;
    if t - ht < 0.0 || t + ht > 1.0 {
        return Err(CasError::OutOfRange(format!("t = {t} too close to the ends of [0, 1]")));
    }
    let field = SliceField::new(&path_slice(grid, t)?)?;
    let before = grid.eval_at(t - ht)?.prepare()?;
    let after = grid.eval_at(t + ht)?.prepare()?;
    let current = |x: &DVector<f64>| -> Result<(DVector<f64>, bool)> {
        let e = field.drift(x)?;
        let grad_p = field.prepared.score(x).grad * e.density;
        Ok((&e.drift * e.density - grad_p * 0.5, e.clamped))
    };
    let hx = FD_STEP_X;
    let mut max_abs = 0.0_f64;
    let mut max_dpdt = 0.0_f64;
    let mut max_p = 0.0_f64;
    let mut clamped = 0;
    for x in pts {
        let dpdt = (after.density(x) - before.density(x)) / (2.0 * ht);
        let mut div = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += hx;
            xm[i] -= hx;
            let (jp, cp) = current(&xp)?;
            let (jm, cm) = current(&xm)?;
            clamped += usize::from(cp) + usize::from(cm);
            div += (jp[i] - jm[i]) / (2.0 * hx);
        }
        max_abs = max_abs.max((dpdt + div).abs());
        max_dpdt = max_dpdt.max(dpdt.abs());
        max_p = max_p.max(field.density(x));
    }
    let scale = max_dpdt.max(1e-6 * max_p);
    Ok(FpResidual {
        t,
        relative: if scale > 0.0 { max_abs / scale } else { 0.0 },
        max_abs,
        max_dp_dt: max_dpdt,
        points: pts.len(),
        clamped,
    })
}

/// `n_frames` evaluations of the path at uniformly spaced times, both ends
/// included. Frames that land on grid times are the node states exactly.
pub fn movie_frames(grid: &ProtocolGrid, n_frames: usize) -> Result<Vec<GaussianMixture>> {
    if n_frames < 2 {
        return Err(CasError::OutOfRange("need at least two frames".into()));
    }
    let l = grid.segments();
    let last = n_frames - 1;
    (0..n_frames)
        .map(|i| {
            if (i * l) % last == 0 {
                Ok(grid.nodes()[i * l / last].clone())
            } else {
                grid.eval_at(i as f64 / last as f64)
            }
        })
        .collect()
}

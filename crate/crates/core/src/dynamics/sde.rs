//! Euler-Maruyama integration of the replay SDE `dX = s_t(X) dt + dW`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{path_slice, SliceField};
use crate::error::{CasError, Result};
use crate::protocol::ProtocolGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub path_id: usize,
    pub seed: u64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// The path hit a non-finite drift and stopped early.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeRun {
    pub trajectories: Vec<Trajectory>,
    /// Drift evaluations that divided by a clamped density.
    pub clamped: usize,
}

impl SdeRun {
    /// Terminal states of the paths that finished.
    pub fn terminal_states(&self) -> Vec<DVector<f64>> {
        self.trajectories
            .iter()
            .filter(|t| !t.failed)
            .map(|t| t.states.last().expect("trajectory has a start").clone())
            .collect()
    }

    pub fn failed(&self) -> usize {
        self.trajectories.iter().filter(|t| t.failed).count()
    }
}

fn slice_fields(grid: &ProtocolGrid, steps: usize) -> Result<Vec<SliceField>> {
    (0..steps)
        .into_par_iter()
        .map(|i| SliceField::new(&path_slice(grid, i as f64 / steps as f64)?))
        .collect()
}

/// Path `i` draws from ChaCha8 seeded with `seed` on stream `i`, so results
/// do not depend on thread scheduling.
fn run_path(
    fields: &[SliceField],
    grid: &ProtocolGrid,
    steps: usize,
    seed: u64,
    path_id: usize,
    keep: bool,
) -> Result<(Trajectory, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_id as u64);
    let dt = 1.0 / steps as f64;
    let sq = dt.sqrt();
    let mut x = grid.nodes()[0].sample_with(&mut rng, 1)?.remove(0);
    let d = x.len();
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    let mut clamped = 0;
    let mut failed = false;
    for (i, field) in fields.iter().enumerate() {
        let e = match field.drift(&x) {
            Ok(e) => e,
            Err(CasError::NonFinite(_)) => {
                failed = true;
                break;
            }
            Err(err) => return Err(err),
        };
        clamped += usize::from(e.clamped);
        let noise = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        x += e.drift * dt + noise * sq;
        if x.iter().any(|v| !v.is_finite()) {
            failed = true;
            break;
        }
        if keep || i + 1 == steps {
            times.push((i + 1) as f64 * dt);
            states.push(x.clone());
        }
    }
    if !keep && !failed {
        times.drain(..times.len() - 1);
        states.drain(..states.len() - 1);
    }
    Ok((Trajectory { path_id, seed, times, states, failed }, clamped))
}

fn run(grid: &ProtocolGrid, n_paths: usize, steps: usize, seed: u64, keep: bool) -> Result<SdeRun> {
    if steps == 0 {
        return Err(CasError::OutOfRange("steps must be at least 1".into()));
    }
    let fields = slice_fields(grid, steps)?;
    let out: Vec<(Trajectory, usize)> = (0..n_paths)
        .into_par_iter()
        .map(|p| run_path(&fields, grid, steps, seed, p, keep))
        .collect::<Result<_>>()?;
    let clamped = out.iter().map(|(_, c)| c).sum();
    Ok(SdeRun { trajectories: out.into_iter().map(|(t, _)| t).collect(), clamped })
}

/// Full trajectories, `steps + 1` states each, starting from draws of node 0.
pub fn integrate_sde(grid: &ProtocolGrid, n_paths: usize, steps: usize, seed: u64) -> Result<SdeRun> {
    run(grid, n_paths, steps, seed, true)
}

/// Same paths as [`integrate_sde`] but only the terminal state is kept.
pub fn sde_terminal_states(grid: &ProtocolGrid, n_paths: usize, steps: usize, seed: u64) -> Result<SdeRun> {
    run(grid, n_paths, steps, seed, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gm::GaussianMixture;
    use nalgebra::DMatrix;

    fn iso(mean: &[f64], var: f64) -> GaussianMixture {
        let d = mean.len();
        GaussianMixture::gaussian(DVector::from_column_slice(mean), DMatrix::identity(d, d) * var)
            .unwrap()
    }

    fn moments(xs: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let n = xs.len() as f64;
        let d = xs[0].len();
        let mean = xs.iter().fold(DVector::zeros(d), |a, x| a + x) / n;
        let cov = xs.iter().fold(DMatrix::zeros(d, d), |a, x| {
            let c = x - &mean;
            a + &c * c.transpose()
        }) / (n - 1.0);
        (mean, cov)
    }

    #[test]
    fn static_path_is_stationary() {
        let g = iso(&[0.0, 0.0], 1.0);
        let grid = ProtocolGrid::from_nodes(vec![g.clone(), g]).unwrap();
        let n = 4000;
        let run = sde_terminal_states(&grid, n, 200, 3).unwrap();
        let (mean, cov) = moments(&run.terminal_states());
        let tol = 4.0 / (n as f64).sqrt();
        assert!(mean.amax() < tol, "{mean}");
        assert!((cov - DMatrix::identity(2, 2)).amax() < 2.0 * tol * 2f64.sqrt());
    }

    #[test]
    fn deterministic_and_kept_paths_agree() {
        let grid = ProtocolGrid::init(&iso(&[0.0, 0.0], 1.0), &iso(&[1.0, 0.0], 0.5), 2).unwrap();
        let a = integrate_sde(&grid, 20, 50, 9).unwrap();
        let b = integrate_sde(&grid, 20, 50, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectories[0].states.len(), 51);
        assert_eq!(a.trajectories[0].times[50], 1.0);
        let c = sde_terminal_states(&grid, 20, 50, 9).unwrap();
        assert_eq!(c.terminal_states(), a.terminal_states());
        let d = integrate_sde(&grid, 20, 50, 10).unwrap();
        assert_ne!(a, d);
    }
}

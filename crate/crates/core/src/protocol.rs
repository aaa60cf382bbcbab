//! Protocol grids and the daily compress-add-smooth recursion.
//!
//! A [`ProtocolGrid`] stores `L + 1` mixtures at the implicit uniform times
//! `j / L`; between nodes the parameters are linearly interpolated. One day of
//! the recursion is:
//!
//! 1. [`ProtocolGrid::compress`]: relabel node `j` to time `j / (L + 1)`. Lossless.
//! 2. [`CompressedGrid::add`]: append the new target at `t = 1`. Non-destructive.
//! 3. [`AugmentedGrid::smooth`]: evaluate the `L + 1`-segment path on the
//!    `L`-segment grid. This is the only lossy step.
//!
//! Readout times only change in step 1, by the factor `L / (L + 1)`.

use std::collections::BTreeMap;

use crate::error::{CasError, Result};
use crate::gm::GaussianMixture;

/// `(L / (L + 1))^age`.
pub fn readout_time(segments: usize, age: usize) -> f64 {
    let ratio = segments as f64 / (segments as f64 + 1.0);
    ratio.powi(age as i32)
}

/// Reals stored by a protocol grid: `(L + 1) K (d^2 + d + 1)`.
pub fn memory_footprint(segments: usize, k: usize, d: usize) -> usize {
    (segments + 1) * k * (d * d + d + 1)
}

fn check_compatible(nodes: &[GaussianMixture]) -> Result<()> {
    let (k, d) = (nodes[0].k(), nodes[0].dim());
    for (j, n) in nodes.iter().enumerate() {
        if n.k() != k || n.dim() != d {
            return Err(CasError::Mismatch(format!(
                "node {j} has K={}, d={}; expected K={k}, d={d}",
                n.k(),
                n.dim()
            )));
        }
    }
    Ok(())
}

/// Segment index and in-segment fraction of `t` on a uniform grid with
/// `segments` segments; `t = 1` lands in the last segment with fraction 1.
fn locate(t: f64, segments: usize) -> (usize, f64) {
    let x = t * segments as f64;
    let j = (x.floor() as usize).min(segments - 1);
    (j, x - j as f64)
}

fn eval_uniform(nodes: &[GaussianMixture], t: f64) -> Result<GaussianMixture> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CasError::OutOfRange(format!("t = {t} outside [0, 1]")));
    }
    let segments = nodes.len() - 1;
    if t == 1.0 {
        return Ok(nodes[segments].clone());
    }
    let (j, alpha) = locate(t, segments);
    Ok(GaussianMixture::lerp(&nodes[j], &nodes[j + 1], alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolGrid {
    nodes: Vec<GaussianMixture>,
}

impl ProtocolGrid {
    /// Day-one grid: node `j` is `(1 - j/L) prior + (j/L) target`.
    pub fn init(prior: &GaussianMixture, target: &GaussianMixture, segments: usize) -> Result<Self> {
        if segments == 0 {
            return Err(CasError::OutOfRange("segment count must be at least 1".into()));
        }
        if prior.k() != target.k() || prior.dim() != target.dim() {
            return Err(CasError::Mismatch(format!(
                "prior has K={}, d={} but target has K={}, d={}",
                prior.k(),
                prior.dim(),
                target.k(),
                target.dim()
            )));
        }
        let nodes = (0..=segments)
            .map(|j| GaussianMixture::lerp(prior, target, j as f64 / segments as f64))
            .collect();
        Ok(Self { nodes })
    }

    /// Grid from explicit node states (at least two, equal `K` and `d`, each valid).
    pub fn from_nodes(nodes: Vec<GaussianMixture>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(CasError::OutOfRange("a protocol grid needs at least two nodes".into()));
        }
        check_compatible(&nodes)?;
        for n in &nodes {
            n.validate()?;
        }
        Ok(Self { nodes })
    }

    /// Number of segments `L`.
    pub fn segments(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[GaussianMixture] {
        &self.nodes
    }

    pub fn k(&self) -> usize {
        self.nodes[0].k()
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].dim()
    }

    /// Piecewise-linear interpolation of the node parameters at `t`.
    pub fn eval_at(&self, t: f64) -> Result<GaussianMixture> {
        eval_uniform(&self.nodes, t)
    }

    /// Relabels node `j` from `j / L` to `j / (L + 1)`; the states are unchanged.
    pub fn compress(&self) -> CompressedGrid {
        CompressedGrid { nodes: self.nodes.clone() }
    }

    /// One full compress-add-smooth step.
    pub fn advance(&self, target: &GaussianMixture) -> Result<Self> {
        Ok(self.compress().add(target)?.smooth())
    }
}

/// The old protocol squeezed onto `[0, L / (L + 1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedGrid {
    nodes: Vec<GaussianMixture>,
}

impl CompressedGrid {
    pub fn nodes(&self) -> &[GaussianMixture] {
        &self.nodes
    }

    /// Upper end of the compressed time range, `L / (L + 1)`.
    pub fn horizon(&self) -> f64 {
        let l = (self.nodes.len() - 1) as f64;
        l / (l + 1.0)
    }

    /// Evaluates the compressed path at `t` in `[0, L / (L + 1)]`; node `j`
    /// sits at `j / (L + 1)`.
    pub fn eval_at(&self, t: f64) -> Result<GaussianMixture> {
        let l = self.nodes.len() - 1;
        let x = t * (l as f64 + 1.0);
        if !(0.0..=l as f64).contains(&x) {
            return Err(CasError::OutOfRange(format!(
                "t = {t} outside [0, {}]",
                self.horizon()
            )));
        }
        let j = (x.floor() as usize).min(l - 1);
        Ok(GaussianMixture::lerp(&self.nodes[j], &self.nodes[j + 1], x - j as f64))
    }

    /// Appends the new day at `t = 1`.
    pub fn add(self, target: &GaussianMixture) -> Result<AugmentedGrid> {
        let last = &self.nodes[0];
        if last.k() != target.k() || last.dim() != target.dim() {
            return Err(CasError::Mismatch(format!(
                "target has K={}, d={}; grid has K={}, d={}",
                target.k(),
                target.dim(),
                last.k(),
                last.dim()
            )));
        }
        let mut nodes = self.nodes;
        nodes.push(target.clone());
        Ok(AugmentedGrid { nodes })
    }
}

/// `L + 2` nodes at the implicit times `k / (L + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedGrid {
    nodes: Vec<GaussianMixture>,
}

impl AugmentedGrid {
    pub fn from_nodes(nodes: Vec<GaussianMixture>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(CasError::OutOfRange("an augmented grid needs at least three nodes".into()));
        }
        check_compatible(&nodes)?;
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[GaussianMixture] {
        &self.nodes
    }

    /// Segment budget `L` the grid will be rebinned to.
    pub fn target_segments(&self) -> usize {
        self.nodes.len() - 2
    }

    pub fn eval_at(&self, t: f64) -> Result<GaussianMixture> {
        eval_uniform(&self.nodes, t)
    }

    /// Rebins onto `L` uniform segments: new node `j` interpolates the two
    /// augmented nodes that bracket `j / L`.
    pub fn smooth(&self) -> ProtocolGrid {
        let w = RebinMatrix::new(self.target_segments());
        let nodes = w
            .rows
            .iter()
            .map(|&(k, alpha)| {
                if alpha == 0.0 {
                    self.nodes[k].clone()
                } else {
                    GaussianMixture::lerp(&self.nodes[k], &self.nodes[k + 1], alpha)
                }
            })
            .collect();
        ProtocolGrid { nodes }
    }

    /// Same rebinning written as `W . P` with `P` the stacked node parameters.
    pub fn smooth_via_matrix(&self, w: &RebinMatrix) -> ProtocolGrid {
        let (k, d) = (self.nodes[0].k(), self.nodes[0].dim());
        let stack: Vec<Vec<f64>> = self.nodes.iter().map(GaussianMixture::to_flat).collect();
        let dense = w.to_dense();
        let nodes = dense
            .iter()
            .map(|row| {
                let mut acc = vec![0.0; stack[0].len()];
                for (col, &wt) in row.iter().enumerate() {
                    if wt != 0.0 {
                        for (a, v) in acc.iter_mut().zip(&stack[col]) {
                            *a += wt * v;
                        }
                    }
                }
                GaussianMixture::from_flat(&acc, k, d)
            })
            .collect();
        ProtocolGrid { nodes }
    }
}

/// Sparse `(L + 1) x (L + 2)` rebinning matrix. Row `j` has weight
/// `1 - alpha` on column `k` and `alpha` on column `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RebinMatrix {
    rows: Vec<(usize, f64)>,
}

impl RebinMatrix {
    pub fn new(segments: usize) -> Self {
        assert!(segments >= 1, "segment count must be at least 1");
        let l = segments;
        let rows = (0..=l)
            .map(|j| {
                // t_new = j/L sits at j(L+1)/L on the augmented index scale;
                // integer arithmetic keeps grid coincidences exact.
                let num = j * (l + 1);
                let (k, rem) = (num / l, num % l);
                if k > l {
                    (l, 1.0)
                } else {
                    (k, rem as f64 / l as f64)
                }
            })
            .collect();
        Self { rows }
    }

    pub fn segments(&self) -> usize {
        self.rows.len() - 1
    }

    /// Nonzero entries of row `j` as `(column, weight)`.
    pub fn row(&self, j: usize) -> Vec<(usize, f64)> {
        let (k, alpha) = self.rows[j];
        [(k, 1.0 - alpha), (k + 1, alpha)].into_iter().filter(|&(_, w)| w != 0.0).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let cols = self.rows.len() + 1;
        (0..self.rows.len())
            .map(|j| {
                let mut r = vec![0.0; cols];
                for (c, w) in self.row(j) {
                    r[c] = w;
                }
                r
            })
            .collect()
    }
}

/// Full agent memory: prior, protocol grid, readout-time dictionary and the
/// retained daily targets (kept for metrics only).
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    prior: GaussianMixture,
    grid: ProtocolGrid,
    day: usize,
    readout: BTreeMap<usize, f64>,
    originals: Vec<GaussianMixture>,
}

impl MemoryState {
    /// Day-one state.
    pub fn new(prior: GaussianMixture, first_target: GaussianMixture, segments: usize) -> Result<Self> {
        prior.validate()?;
        first_target.validate()?;
        let grid = ProtocolGrid::init(&prior, &first_target, segments)?;
        Ok(Self {
            prior,
            grid,
            day: 1,
            readout: BTreeMap::from([(1, 1.0)]),
            originals: vec![first_target],
        })
    }

    /// Reassembles a state from persisted parts.
    pub fn from_parts(
        prior: GaussianMixture,
        grid: ProtocolGrid,
        day: usize,
        readout: BTreeMap<usize, f64>,
        originals: Vec<GaussianMixture>,
    ) -> Result<Self> {
        if day == 0 || readout.len() != day || readout.keys().copied().ne(1..=day) {
            return Err(CasError::Schema(format!("readout must hold exactly days 1..={day}")));
        }
        if readout[&day] != 1.0 {
            return Err(CasError::Schema("readout time of the current day must be 1".into()));
        }
        if originals.len() != day {
            return Err(CasError::Schema(format!(
                "expected {day} retained targets, got {}",
                originals.len()
            )));
        }
        if prior.k() != grid.k() || prior.dim() != grid.dim() {
            return Err(CasError::Mismatch("prior and grid disagree on K or d".into()));
        }
        Ok(Self { prior, grid, day, readout, originals })
    }

    /// Compress, add, smooth; then rescale readout times and record the target.
    pub fn incorporate(&mut self, target: GaussianMixture) -> Result<()> {
        target.validate()?;
        self.grid = self.grid.advance(&target)?;
        let ratio = self.segments() as f64 / (self.segments() as f64 + 1.0);
        for t in self.readout.values_mut() {
            *t *= ratio;
        }
        self.day += 1;
        self.readout.insert(self.day, 1.0);
        self.originals.push(target);
        Ok(())
    }

    /// Replay of day `m`: the current path evaluated at `t_{m|n}`.
    pub fn replay(&self, m: usize) -> Result<GaussianMixture> {
        self.grid.eval_at(self.readout_time(m)?)
    }

    pub fn readout_time(&self, m: usize) -> Result<f64> {
        self.readout
            .get(&m)
            .copied()
            .ok_or(CasError::UnknownDay { day: m, current: self.day })
    }

    pub fn segments(&self) -> usize {
        self.grid.segments()
    }

    pub fn day(&self) -> usize {
        self.day
    }

    pub fn prior(&self) -> &GaussianMixture {
        &self.prior
    }

    pub fn grid(&self) -> &ProtocolGrid {
        &self.grid
    }

    pub fn readout(&self) -> &BTreeMap<usize, f64> {
        &self.readout
    }

    pub fn originals(&self) -> &[GaussianMixture] {
        &self.originals
    }

    pub fn original(&self, m: usize) -> Result<&GaussianMixture> {
        self.originals.get(m.wrapping_sub(1)).ok_or(CasError::UnknownDay { day: m, current: self.day })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gm::tests::random_mixture;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iso(mean: &[f64], var: f64) -> GaussianMixture {
        let d = mean.len();
        GaussianMixture::gaussian(DVector::from_column_slice(mean), DMatrix::identity(d, d) * var)
            .unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, l: usize, k: usize, d: usize) -> ProtocolGrid {
        ProtocolGrid::from_nodes((0..=l).map(|_| random_mixture(rng, k, d)).collect()).unwrap()
    }

    #[test]
    fn init_midpoint_and_endpoints() {
        let prior = iso(&[0.0, 0.0], 1.0);
        let target = iso(&[2.0, 0.0], 0.5);
        let g = ProtocolGrid::init(&prior, &target, 10).unwrap();
        assert_eq!(g.nodes().len(), 11);
        assert_eq!(g.nodes()[0], prior);
        assert_eq!(g.nodes()[10], target);
        let mid = &g.nodes()[5];
        assert!((mid.means()[0][0] - 1.0).abs() < 1e-15);
        assert!((mid.covs()[0][(0, 0)] - 0.75).abs() < 1e-15);
        assert!(g.nodes().iter().all(|n| n.validate().is_ok()));
    }

    #[test]
    fn init_rejects_k_mismatch() {
        let prior = GaussianMixture::standard(2, 2).unwrap();
        let target = iso(&[1.0, 0.0], 1.0);
        assert!(matches!(ProtocolGrid::init(&prior, &target, 4), Err(CasError::Mismatch(_))));
    }

    #[test]
    fn eval_hits_nodes_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 10, 2, 2);
        for j in 0..=10 {
            assert_eq!(g.eval_at(j as f64 / 10.0).unwrap(), g.nodes()[j], "node {j}");
        }
        assert_eq!(g.eval_at(1.0).unwrap(), g.nodes()[10]);
        assert!(g.eval_at(1.0 + 1e-12).is_err());
        assert!(g.eval_at(-1e-12).is_err());
    }

    #[test]
    fn eval_matches_dense_oracle() {
        // Independent oracle: scan segments for the bracketing pair.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_grid(&mut rng, 7, 2, 3);
        for _ in 0..200 {
            let t: f64 = rng.gen();
            let times: Vec<f64> = (0..=7).map(|j| j as f64 / 7.0).collect();
            let j = (0..7).rev().find(|&j| times[j] <= t).unwrap();
            let alpha = (t - times[j]) / (times[j + 1] - times[j]);
            let expect = GaussianMixture::convex_combine(&g.nodes()[j], &g.nodes()[j + 1], alpha).unwrap();
            assert!(g.eval_at(t).unwrap().max_param_diff(&expect) <= 1e-14);
        }
    }

    #[test]
    fn compression_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for l in [1, 3, 10] {
            let g = random_grid(&mut rng, l, 3, 2);
            let c = g.compress();
            assert_eq!(c.nodes(), g.nodes());
            let scale = l as f64 / (l as f64 + 1.0);
            for _ in 0..100 {
                let t: f64 = rng.gen();
                let a = g.eval_at(t).unwrap();
                let b = c.eval_at(t * scale).unwrap();
                assert!(a.max_param_diff(&b) <= 1e-13, "L={l}, t={t}");
            }
        }
    }

    #[test]
    fn add_is_non_destructive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_grid(&mut rng, 10, 2, 2);
        let q = random_mixture(&mut rng, 2, 2);
        let aug = g.compress().add(&q).unwrap();
        assert_eq!(aug.nodes().len(), 12);
        assert_eq!(&aug.nodes()[..11], g.nodes());
        assert_eq!(aug.eval_at(1.0).unwrap(), q);
        let mid = aug.eval_at(10.5 / 11.0).unwrap();
        let expect = GaussianMixture::convex_combine(&g.nodes()[10], &q, 0.5).unwrap();
        assert!(mid.max_param_diff(&expect) <= 1e-14);
    }

    #[test]
    fn add_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_grid(&mut rng, 4, 2, 2);
        let q = random_mixture(&mut rng, 3, 2);
        assert!(g.compress().add(&q).is_err());
    }

    #[test]
    fn rebin_rows_are_stochastic() {
        for l in 1..=64 {
            let w = RebinMatrix::new(l);
            let dense = w.to_dense();
            assert_eq!(dense.len(), l + 1);
            for (j, row) in dense.iter().enumerate() {
                assert_eq!(row.len(), l + 2);
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-14, "L={l}, row {j}");
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!(row.iter().filter(|&&v| v != 0.0).count() <= 2);
            }
        }
        let w = RebinMatrix::new(10);
        assert_eq!(w.row(0), vec![(0, 1.0)]);
        assert_eq!(w.row(10), vec![(11, 1.0)]);
    }

    #[test]
    fn smoothing_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for l in [1, 2, 5, 10, 17] {
            let g = random_grid(&mut rng, l, 3, 3);
            let aug = g.compress().add(&random_mixture(&mut rng, 3, 3)).unwrap();
            let direct = aug.smooth();
            let via = aug.smooth_via_matrix(&RebinMatrix::new(l));
            for (a, b) in direct.nodes().iter().zip(via.nodes()) {
                assert!(a.max_param_diff(b) <= 1e-14);
            }
            // Direct path is also the augmented path evaluated at j/L.
            for (j, n) in direct.nodes().iter().enumerate() {
                let e = aug.eval_at(j as f64 / l as f64).unwrap();
                assert!(n.max_param_diff(&e) <= 1e-14);
                assert!(n.validate().is_ok());
            }
            assert_eq!(direct.nodes()[l], aug.nodes()[l + 1]);
            assert_eq!(direct.nodes()[0], aug.nodes()[0]);
        }
    }

    #[test]
    fn readout_times() {
        assert_eq!(readout_time(10, 0), 1.0);
        assert!((readout_time(10, 20) - 0.148_643_628_024_143_7).abs() < 1e-15);
        assert!((readout_time(10, 30) - 0.057_308_553_301_168_09).abs() < 1e-15);
    }

    #[test]
    fn footprint() {
        assert_eq!(memory_footprint(20, 3, 8), 4599);
        assert_eq!(memory_footprint(1, 1, 1), 6);
    }

    #[test]
    fn memory_recursion_invariants() {
        let prior = iso(&[0.0, 0.0], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let targets: Vec<_> = (0..100)
            .map(|_| iso(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)], rng.gen_range(0.3..1.5)))
            .collect();
        let mut st = MemoryState::new(prior.clone(), targets[0].clone(), 10).unwrap();
        for tg in &targets[1..] {
            st.incorporate(tg.clone()).unwrap();
            assert_eq!(st.grid().eval_at(1.0).unwrap(), *tg);
            assert_eq!(st.grid().nodes()[0], prior);
            assert_eq!(st.replay(st.day()).unwrap(), *tg);
        }
        assert_eq!(st.day(), 100);
        for m in 1..=100 {
            let t = st.readout_time(m).unwrap();
            assert!((t - readout_time(10, 100 - m)).abs() <= 1e-12);
        }
        assert!(st.replay(99).unwrap().validate().is_ok());
        assert_eq!(st.replay(40).unwrap(), st.replay(40).unwrap());
        assert!(matches!(st.replay(0), Err(CasError::UnknownDay { .. })));
        assert!(matches!(st.replay(101), Err(CasError::UnknownDay { .. })));
    }

    #[test]
    fn constant_stream_never_adds_variation() {
        // Once the newest node equals the repeated target, rebinning can only
        // flatten the path: total variation along the grid never grows.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let l = 10;
        let target = random_mixture(&mut rng, 2, 2);
        let mut nodes: Vec<_> = (0..l).map(|_| random_mixture(&mut rng, 2, 2)).collect();
        nodes.push(target.clone());
        let mut grid = ProtocolGrid::from_nodes(nodes).unwrap();
        let variation = |g: &ProtocolGrid| -> f64 {
            let flat: Vec<Vec<f64>> = g.nodes().iter().map(GaussianMixture::to_flat).collect();
            flat.windows(2)
                .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).sum::<f64>())
                .sum()
        };
        let mut prev = variation(&grid);
        for _ in 0..60 {
            grid = grid.advance(&target).unwrap();
            let v = variation(&grid);
            assert!(v <= prev * (1.0 + 1e-13), "variation grew from {prev} to {v}");
            prev = v;
        }
        assert_eq!(grid.nodes()[l], target);
    }
}

//! Gaussian-mixture value type.
//!
//! A [`GaussianMixture`] is the unit of state everywhere in the crate: protocol
//! nodes, daily targets, replays and priors are all mixtures with a fixed
//! component count `K` and dimension `d`. Values are immutable once built.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CasError, Result, Violation};

/// Tolerance on `|sum(weights) - 1|`.
pub const SIMPLEX_TOL: f64 = 1e-12;
/// Tolerance on `max |S - S^T|` before symmetrization.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Smallest admissible eigenvalue, relative to the largest one.
pub const PD_REL_TOL: f64 = 1e-10;
/// Absolute density floor used when dividing by `p(x)`.
pub const DENSITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

/// Overall mean and covariance of a mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Gradient of `log p` together with a flag telling whether `p(x)` fell below
/// [`DENSITY_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEval {
    pub grad: DVector<f64>,
    pub clamped: bool,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl GaussianMixture {
    /// Builds a validated mixture. Covariances are symmetrized after the
    /// symmetry check.
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let gm = Self { weights, means, covs };
        gm.validate()?;
        Ok(gm.symmetrized())
    }

    /// Builds a mixture without any checks. Use [`GaussianMixture::validate`]
    /// to inspect the result.
    pub fn from_parts_unchecked(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
    ) -> Self {
        Self { weights, means, covs }
    }

    /// Single Gaussian `N(mean, cov)`.
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// `k` equally weighted copies of `N(mean, cov)`.
    pub fn replicated(k: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Violation::Empty.into());
        }
        Self::new(vec![1.0 / k as f64; k], vec![mean; k], vec![cov; k])
    }

    /// `k` equally weighted copies of the standard normal in `d` dimensions.
    pub fn standard(k: usize, d: usize) -> Result<Self> {
        Self::replicated(k, DVector::zeros(d), DMatrix::identity(d, d))
    }

    fn symmetrized(mut self) -> Self {
        for c in &mut self.covs {
            *c = symmetrize(c);
        }
        self
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    /// Number of stored reals: `K (d^2 + d + 1)`.
    pub fn n_reals(&self) -> usize {
        let d = self.dim();
        self.k() * (d * d + d + 1)
    }

    /// Returns the first violated invariant, if any.
    pub fn validate(&self) -> std::result::Result<(), Violation> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Violation::Empty);
        }
        if self.means.len() != k || self.covs.len() != k {
            return Err(Violation::ShapeMismatch {
                component: 0,
                detail: format!(
                    "{k} weights, {} means, {} covariances",
                    self.means.len(),
                    self.covs.len()
                ),
            });
        }
        let d = self.means[0].len();
        if d == 0 {
            return Err(Violation::ShapeMismatch { component: 0, detail: "zero dimension".into() });
        }
        for (i, (m, c)) in self.means.iter().zip(&self.covs).enumerate() {
            if m.len() != d || c.nrows() != d || c.ncols() != d {
                return Err(Violation::ShapeMismatch {
                    component: i,
                    detail: format!("expected dimension {d}"),
                });
            }
            if !self.weights[i].is_finite()
                || m.iter().any(|v| !v.is_finite())
                || c.iter().any(|v| !v.is_finite())
            {
                return Err(Violation::NonFinite { component: i });
            }
        }
        for (i, &w) in self.weights.iter().enumerate() {
            if w < 0.0 {
                return Err(Violation::NegativeWeight { component: i, value: w });
            }
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Violation::SimplexSum { sum });
        }
        for (i, c) in self.covs.iter().enumerate() {
            let scale = c.amax().max(1.0);
            let dev = (c - c.transpose()).amax();
            if dev > SYMMETRY_TOL * scale {
                return Err(Violation::Asymmetric { component: i, max_deviation: dev });
            }
            let eig = SymmetricEigen::new(symmetrize(c)).eigenvalues;
            let lo = eig.min();
            let hi = eig.max();
            if !(lo > 0.0 && lo >= PD_REL_TOL * hi) {
                return Err(Violation::NotPositiveDefinite {
                    component: i,
                    min_eigenvalue: lo,
                    max_eigenvalue: hi,
                });
            }
        }
        Ok(())
    }

    /// Mean `sum_k pi_k m_k` and covariance
    /// `sum_k pi_k (S_k + m_k m_k^T) - mean mean^T`.
    pub fn overall_moments(&self) -> Moments {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        for ((&w, m), c) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            mean.axpy(w, m, 1.0);
            second += (c + m * m.transpose()) * w;
        }
        let cov = second - &mean * mean.transpose();
        Moments { mean, cov: symmetrize(&cov) }
    }

    /// Precomputes per-component factorizations for repeated evaluation.
    pub fn prepare(&self) -> Result<PreparedMixture> {
        PreparedMixture::new(self)
    }

    pub fn density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.prepare()?.density(x))
    }

    pub fn score(&self, x: &DVector<f64>) -> Result<ScoreEval> {
        Ok(self.prepare()?.score(x))
    }

    /// Draws `n` points: categorical component choice followed by
    /// `m_k + L_k z` with `L_k` the Cholesky factor of `S_k`.
    pub fn sample(&self, seed: u64, n: usize) -> Result<Vec<DVector<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(&mut rng, n)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<DVector<f64>>> {
        let factors = self
            .covs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                Cholesky::new(c.clone()).map(|ch| ch.l()).ok_or_else(|| {
                    CasError::Invalid(Violation::NotPositiveDefinite {
                        component: i,
                        min_eigenvalue: f64::NAN,
                        max_eigenvalue: f64::NAN,
                    })
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d = self.dim();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let k = pick_component(&self.weights, rng.gen::<f64>());
            let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            out.push(&self.means[k] + &factors[k] * z);
        }
        Ok(out)
    }

    /// Componentwise `(1 - alpha) a + alpha b` on weights, means and
    /// covariances. Components are paired by index; no matching is done.
    pub fn convex_combine(a: &Self, b: &Self, alpha: f64) -> Result<Self> {
        if a.k() != b.k() || a.dim() != b.dim() {
            return Err(CasError::Mismatch(format!(
                "cannot combine K={}, d={} with K={}, d={}",
                a.k(),
                a.dim(),
                b.k(),
                b.dim()
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CasError::OutOfRange(format!("alpha = {alpha} outside [0, 1]")));
        }
        Ok(Self::lerp(a, b, alpha))
    }

    /// Unchecked convex combination; endpoints are returned exactly.
    pub(crate) fn lerp(a: &Self, b: &Self, alpha: f64) -> Self {
        if alpha == 0.0 {
            return a.clone();
        }
        if alpha == 1.0 {
            return b.clone();
        }
        let beta = 1.0 - alpha;
        let weights = a.weights.iter().zip(&b.weights).map(|(x, y)| beta * x + alpha * y).collect();
        let means = a.means.iter().zip(&b.means).map(|(x, y)| x * beta + y * alpha).collect();
        let covs = a.covs.iter().zip(&b.covs).map(|(x, y)| x * beta + y * alpha).collect();
        Self { weights, means, covs }
    }

    /// Same mixture with components reordered: component `i` of the result
    /// is component `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            weights: order.iter().map(|&i| self.weights[i]).collect(),
            means: order.iter().map(|&i| self.means[i].clone()).collect(),
            covs: order.iter().map(|&i| self.covs[i].clone()).collect(),
        }
    }

    /// Largest absolute difference over all parameters. Panics on shape mismatch.
    pub fn max_param_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.k(), self.dim()), (other.k(), other.dim()));
        let w = self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b).abs());
        let m = self.means.iter().zip(&other.means).map(|(a, b)| (a - b).amax());
        let c = self.covs.iter().zip(&other.covs).map(|(a, b)| (a - b).amax());
        w.chain(m).chain(c).fold(0.0, f64::max)
    }

    /// Flat parameter vector `[w_0, m_0.., S_0.., w_1, ...]`, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_reals());
        for k in 0..self.k() {
            out.push(self.weights[k]);
            out.extend(self.means[k].iter());
            let c = &self.covs[k];
            for i in 0..c.nrows() {
                for j in 0..c.ncols() {
                    out.push(c[(i, j)]);
                }
            }
        }
        out
    }

    /// Inverse of [`GaussianMixture::to_flat`]; unchecked.
    pub fn from_flat(flat: &[f64], k: usize, d: usize) -> Self {
        let stride = d * d + d + 1;
        assert_eq!(flat.len(), k * stride);
        let mut weights = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for chunk in flat.chunks(stride) {
            weights.push(chunk[0]);
            means.push(DVector::from_column_slice(&chunk[1..=d]));
            covs.push(DMatrix::from_row_slice(d, d, &chunk[d + 1..]));
        }
        Self { weights, means, covs }
    }
}

fn pick_component(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Cached inverse covariances and normalizers of one mixture.
#[derive(Debug, Clone)]
pub struct PreparedMixture {
    gm: GaussianMixture,
    precisions: Vec<DMatrix<f64>>,
    log_norms: Vec<f64>,
    log_weights: Vec<f64>,
}

impl PreparedMixture {
    pub fn new(gm: &GaussianMixture) -> Result<Self> {
        let d = gm.dim() as f64;
        let mut precisions = Vec::with_capacity(gm.k());
        let mut log_norms = Vec::with_capacity(gm.k());
        for (i, c) in gm.covs.iter().enumerate() {
            let ch = Cholesky::new(c.clone()).ok_or_else(|| {
                CasError::Invalid(Violation::NotPositiveDefinite {
                    component: i,
                    min_eigenvalue: f64::NAN,
                    max_eigenvalue: f64::NAN,
                })
            })?;
            let log_det = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            precisions.push(ch.inverse());
            log_norms.push(-0.5 * (d * (2.0 * PI).ln() + log_det));
        }
        let log_weights = gm.weights.iter().map(|w| w.ln()).collect();
        Ok(Self { gm: gm.clone(), precisions, log_norms, log_weights })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.gm
    }

    pub fn precisions(&self) -> &[DMatrix<f64>] {
        &self.precisions
    }

    /// `log N(x; m_k, S_k)` for every component.
    pub fn component_log_densities(&self, x: &DVector<f64>) -> Vec<f64> {
        self.gm
            .means
            .iter()
            .zip(&self.precisions)
            .zip(&self.log_norms)
            .map(|((m, p), ln)| {
                let r = x - m;
                ln - 0.5 * r.dot(&(p * &r))
            })
            .collect()
    }

    /// `pi_k N(x; m_k, S_k)` for every component.
    pub fn weighted_component_densities(&self, x: &DVector<f64>) -> Vec<f64> {
        self.component_log_densities(x)
            .iter()
            .zip(&self.gm.weights)
            .map(|(l, w)| w * l.exp())
            .collect()
    }

    pub fn density(&self, x: &DVector<f64>) -> f64 {
        self.weighted_component_densities(x).iter().sum()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .component_log_densities(x)
            .iter()
            .zip(&self.log_weights)
            .map(|(l, lw)| l + lw)
            .collect();
        log_sum_exp(&terms)
    }

    /// Posterior component probabilities `pi_k g_k(x) / p(x)`, computed in
    /// log space so they stay finite where `p(x)` underflows.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Vec<f64> {
        let terms: Vec<f64> = self
            .component_log_densities(x)
            .iter()
            .zip(&self.log_weights)
            .map(|(l, lw)| l + lw)
            .collect();
        let lse = log_sum_exp(&terms);
        terms.iter().map(|t| (t - lse).exp()).collect()
    }

    pub fn score(&self, x: &DVector<f64>) -> ScoreEval {
        let resp = self.responsibilities(x);
        let mut grad = DVector::zeros(x.len());
        for ((r, m), p) in resp.iter().zip(&self.gm.means).zip(&self.precisions) {
            if *r > 0.0 {
                grad -= p * (x - m) * *r;
            }
        }
        ScoreEval { grad, clamped: self.density(x) < DENSITY_FLOOR }
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// JSON wire form: `{"weights":[..], "means":[[..]], "covs":[[[..]]]}`.
#[derive(Serialize, Deserialize)]
struct GmWire {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<Vec<f64>>>,
}

impl Serialize for GaussianMixture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let wire = GmWire {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covs: self
                .covs
                .iter()
                .map(|c| (0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect())
                .collect(),
        };
        wire.serialize(s)
    }
}

impl<'de> Deserialize<'de> for GaussianMixture {
    /// Deserialization checks shapes only; call `validate` for the numeric
    /// invariants.
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let wire = GmWire::deserialize(de)?;
        let d = wire.means.first().map_or(0, Vec::len);
        let mut covs = Vec::with_capacity(wire.covs.len());
        for (i, c) in wire.covs.iter().enumerate() {
            if c.len() != d || c.iter().any(|row| row.len() != d) {
                return Err(D::Error::custom(format!("covariance {i} is not {d}x{d}")));
            }
            covs.push(DMatrix::from_fn(d, d, |r, col| c[r][col]));
        }
        if wire.means.iter().any(|m| m.len() != d) {
            return Err(D::Error::custom("means have inconsistent dimensions"));
        }
        let means = wire.means.into_iter().map(DVector::from_vec).collect();
        Ok(GaussianMixture { weights: wire.weights, means, covs })
    }
}

//! Forgetting metrics: raw and normalized moment gaps, the forgetting matrix,
//! age curves, retention half-life and the matched per-component decomposition.

mod assignment;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CasError, Result};
use crate::gm::{GaussianMixture, Moments};
use crate::protocol::MemoryState;

/// Default half-life threshold.
pub const DEFAULT_THETA: f64 = 0.5;

/// Per-channel contributions after component matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub mean: f64,
    pub cov: f64,
    pub weight: f64,
}

impl Decomposition {
    pub fn total(&self) -> f64 {
        self.mean + self.cov + self.weight
    }
}

/// Forgetting of day `m` as seen on day `n`. `f_norm` is `None` when the
/// day's amnesia baseline is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRecord {
    pub m: usize,
    pub n: usize,
    pub f_raw: f64,
    pub f_norm: Option<f64>,
    pub decomposition: Option<Decomposition>,
}

impl ForgettingRecord {
    pub fn age(&self) -> usize {
        self.n - self.m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeCurve {
    pub ages: Vec<usize>,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    /// Records left out because their baseline was zero.
    pub skipped: usize,
}

impl AgeCurve {
    pub fn value_at(&self, age: usize) -> Option<f64> {
        self.ages.iter().position(|&a| a == age).map(|i| self.values[i])
    }

    /// Largest value and the age where it occurs (first on ties).
    pub fn max(&self) -> Option<(usize, f64)> {
        self.ages
            .iter()
            .zip(&self.values)
            .fold(None, |best: Option<(usize, f64)>, (&a, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((a, v)),
            })
    }
}

fn moment_gap(a: &Moments, b: &Moments) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(CasError::Mismatch(format!(
            "dimension {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    Ok((&a.mean - &b.mean).norm_squared() + (&a.cov - &b.cov).norm_squared())
}

/// `|mu_r - mu_o|^2 + ||S_r - S_o||_F^2` on overall moments.
pub fn raw_forgetting(replay: &GaussianMixture, orig: &GaussianMixture) -> Result<f64> {
    moment_gap(&replay.overall_moments(), &orig.overall_moments())
}

/// Forgetting of a memory that replays the prior.
pub fn amnesia_baseline(prior: &GaussianMixture, orig: &GaussianMixture) -> Result<f64> {
    raw_forgetting(prior, orig)
}

/// Baseline against explicit reference moments, e.g. a deterministic start
/// with zero covariance.
pub fn amnesia_baseline_from_moments(reference: &Moments, orig: &GaussianMixture) -> Result<f64> {
    moment_gap(reference, &orig.overall_moments())
}

pub fn normalized_forgetting(f: f64, baseline: f64) -> Result<f64> {
    if baseline > 0.0 && baseline.is_finite() {
        Ok(f / baseline)
    } else {
        Err(CasError::OutOfRange(format!("amnesia baseline {baseline} is not positive")))
    }
}

/// Permutation `sigma` with `sigma[k]` the component of `b` matched to
/// component `k` of `a`, minimizing the summed squared mean distance.
pub fn match_components(a: &GaussianMixture, b: &GaussianMixture) -> Result<Vec<usize>> {
    if a.k() != b.k() || a.dim() != b.dim() {
        return Err(CasError::Mismatch(format!(
            "K={}, d={} vs K={}, d={}",
            a.k(),
            a.dim(),
            b.k(),
            b.dim()
        )));
    }
    let cost: Vec<Vec<f64>> = a
        .means()
        .iter()
        .map(|ma| b.means().iter().map(|mb| (ma - mb).norm_squared()).collect())
        .collect();
    Ok(assignment::solve(&cost))
}

/// Mean, covariance and weight channels under the optimal matching, each
/// component weighted by the larger of its two mixture weights.
pub fn decomposed_forgetting(replay: &GaussianMixture, orig: &GaussianMixture) -> Result<Decomposition> {
    let sigma = match_components(replay, orig)?;
    let mut out = Decomposition { mean: 0.0, cov: 0.0, weight: 0.0 };
    for (k, &j) in sigma.iter().enumerate() {
        let (wr, wo) = (replay.weights()[k], orig.weights()[j]);
        let wbar = wr.max(wo);
        out.mean += wbar * (&replay.means()[k] - &orig.means()[j]).norm_squared();
        out.cov += wbar * (&replay.covs()[k] - &orig.covs()[j]).norm_squared();
        out.weight += (wr - wo).powi(2);
    }
    Ok(out)
}

/// Records for every day `m <= n` held by `state` (with `n` its current day).
/// `baselines[m - 1]` is day `m`'s amnesia baseline. Days are processed in
/// parallel; the output is ordered by `m`.
pub fn day_records(state: &MemoryState, baselines: &[f64], decompose: bool) -> Result<Vec<ForgettingRecord>> {
    let n = state.day();
    (1..=n)
        .into_par_iter()
        .map(|m| {
            let replay = state.replay(m)?;
            let orig = state.original(m)?;
            let f_raw = raw_forgetting(&replay, orig)?;
            let baseline = *baselines
                .get(m - 1)
                .ok_or_else(|| CasError::Mismatch(format!("no baseline for day {m}")))?;
            let f_norm = normalized_forgetting(f_raw, baseline).ok();
            let decomposition = if decompose { Some(decomposed_forgetting(&replay, orig)?) } else { None };
            Ok(ForgettingRecord { m, n, f_raw, f_norm, decomposition })
        })
        .collect()
}

/// Runs the recursion over `targets` and returns all `N(N+1)/2` records,
/// ordered by `n` and then `m`.
pub fn forgetting_matrix(
    prior: &GaussianMixture,
    targets: &[GaussianMixture],
    segments: usize,
    decompose: bool,
) -> Result<Vec<ForgettingRecord>> {
    let Some(first) = targets.first() else {
        return Ok(Vec::new());
    };
    let baselines = targets
        .iter()
        .map(|q| amnesia_baseline(prior, q))
        .collect::<Result<Vec<_>>>()?;
    let mut state = MemoryState::new(prior.clone(), first.clone(), segments)?;
    let mut records = Vec::with_capacity(targets.len() * (targets.len() + 1) / 2);
    for (i, q) in targets.iter().enumerate() {
        if i > 0 {
            state.incorporate(q.clone())?;
        }
        records.extend(day_records(&state, &baselines, decompose)?);
    }
    Ok(records)
}

/// Mean normalized forgetting per age; flagged records are skipped and counted.
pub fn age_curve(records: &[ForgettingRecord]) -> AgeCurve {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut skipped = 0;
    for r in records {
        match r.f_norm {
            Some(v) => {
                let e = acc.entry(r.age()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
            None => skipped += 1,
        }
    }
    let mut curve = AgeCurve { ages: Vec::new(), values: Vec::new(), counts: Vec::new(), skipped };
    for (a, (sum, c)) in acc {
        curve.ages.push(a);
        curve.values.push(sum / c as f64);
        curve.counts.push(c);
    }
    curve
}

/// Smallest age whose curve value reaches `theta`.
pub fn half_life(curve: &AgeCurve, theta: f64) -> Option<usize> {
    curve.ages.iter().zip(&curve.values).find(|(_, &v)| v >= theta).map(|(&a, _)| a)
}

/// Shares of the mean, covariance and weight channels. Channels are first
/// averaged per age; the per-age shares are then averaged over ages whose
/// channel total is positive. `None` without decomposed records.
pub fn channel_shares(records: &[ForgettingRecord]) -> Option<Decomposition> {
    let mut acc: BTreeMap<usize, (Decomposition, usize)> = BTreeMap::new();
    for r in records {
        if let Some(d) = r.decomposition {
            let e = acc
                .entry(r.age())
                .or_insert((Decomposition { mean: 0.0, cov: 0.0, weight: 0.0 }, 0));
            e.0.mean += d.mean;
            e.0.cov += d.cov;
            e.0.weight += d.weight;
            e.1 += 1;
        }
    }
    let mut share = Decomposition { mean: 0.0, cov: 0.0, weight: 0.0 };
    let mut ages = 0usize;
    for (sum, _) in acc.values() {
        // The per-age count cancels in the ratio.
        let t = sum.total();
        if t > 0.0 {
            share.mean += sum.mean / t;
            share.cov += sum.cov / t;
            share.weight += sum.weight / t;
            ages += 1;
        }
    }
    (ages > 0).then(|| Decomposition {
        mean: share.mean / ages as f64,
        cov: share.cov / ages as f64,
        weight: share.weight / ages as f64,
    })
}

/// CSV with header `m,n,age,F_raw,F_norm,F_mean,F_cov,F_weight`; missing
/// values are empty fields.
pub fn records_csv(records: &[ForgettingRecord]) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    let mut out = String::from("m,n,age,F_raw,F_norm,F_mean,F_cov,F_weight\n");
    for r in records {
        let d = r.decomposition;
        out.push_str(&format!(
            "{},{},{},{:.16e},{},{},{},{}\n",
            r.m,
            r.n,
            r.age(),
            r.f_raw,
            f(r.f_norm),
            f(d.map(|d| d.mean)),
            f(d.map(|d| d.cov)),
            f(d.map(|d| d.weight)),
        ));
    }
    out
}

/// CSV with header `age,F_bar,count`.
pub fn age_curve_csv(curve: &AgeCurve) -> String {
    let mut out = String::from("age,F_bar,count\n");
    for ((a, v), c) in curve.ages.iter().zip(&curve.values).zip(&curve.counts) {
        out.push_str(&format!("{a},{v:.16e},{c}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gm::tests::random_mixture;
    use itertools::Itertools;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iso(mean: &[f64], var: f64) -> GaussianMixture {
        let d = mean.len();
        GaussianMixture::gaussian(DVector::from_column_slice(mean), DMatrix::identity(d, d) * var)
            .unwrap()
    }

    fn rec(m: usize, n: usize, v: f64) -> ForgettingRecord {
        ForgettingRecord { m, n, f_raw: v, f_norm: Some(v), decomposition: None }
    }

    #[test]
    fn raw_forgetting_hand_values() {
        let a = iso(&[1.0, 0.0], 1.0);
        let b = iso(&[0.0, 0.0], 2.0);
        assert_eq!(raw_forgetting(&a, &a).unwrap(), 0.0);
        assert!((raw_forgetting(&a, &b).unwrap() - 3.0).abs() < 1e-14);
        assert_eq!(raw_forgetting(&a, &b).unwrap(), raw_forgetting(&b, &a).unwrap());
        assert!(raw_forgetting(&a, &iso(&[0.0], 1.0)).is_err());
    }

    #[test]
    fn raw_forgetting_against_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_mixture(&mut rng, 3, 2);
        let b = random_mixture(&mut rng, 2, 2);
        let n = 1_000_000;
        let sample_moments = |gm: &GaussianMixture, seed| {
            let xs = gm.sample(seed, n).unwrap();
            let mean = xs.iter().fold(DVector::zeros(2), |acc, x| acc + x) / n as f64;
            let cov = xs.iter().fold(DMatrix::zeros(2, 2), |acc, x| {
                let c = x - &mean;
                acc + &c * c.transpose()
            }) / (n as f64 - 1.0);
            Moments { mean, cov }
        };
        let est = moment_gap(&sample_moments(&a, 1), &sample_moments(&b, 2)).unwrap();
        let exact = raw_forgetting(&a, &b).unwrap();
        assert!((est - exact).abs() < 0.05 * (1.0 + exact), "{est} vs {exact}");
    }

    #[test]
    fn baseline_hand_values() {
        let prior = iso(&[0.0, 0.0], 1.0);
        let orig = iso(&[2.0, 0.0], 0.5);
        assert!((amnesia_baseline(&prior, &orig).unwrap() - 4.5).abs() < 1e-14);
        assert_eq!(amnesia_baseline(&prior, &prior).unwrap(), 0.0);
        assert!(normalized_forgetting(1.0, 0.0).is_err());
        assert_eq!(normalized_forgetting(0.0, 4.5).unwrap(), 0.0);
        assert_eq!(normalized_forgetting(4.5, 4.5).unwrap(), 1.0);
        let delta = Moments { mean: DVector::zeros(2), cov: DMatrix::zeros(2, 2) };
        assert!((amnesia_baseline_from_moments(&delta, &orig).unwrap() - 4.5).abs() < 1e-14);
    }

    #[test]
    fn matching_recovers_swaps_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_mixture(&mut rng, 3, 2);
        let b = a.permuted(&[1, 0, 2]);
        assert_eq!(match_components(&a, &b).unwrap(), vec![1, 0, 2]);
        assert_eq!(match_components(&a, &a).unwrap(), vec![0, 1, 2]);
        let same = GaussianMixture::standard(4, 2).unwrap();
        assert_eq!(match_components(&same, &same).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn matching_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..200 {
            let k = 1 + i % 6;
            let a = random_mixture(&mut rng, k, 3);
            let b = random_mixture(&mut rng, k, 3);
            let cost = |p: &[usize]| -> f64 {
                p.iter().enumerate().map(|(r, &c)| (&a.means()[r] - &b.means()[c]).norm_squared()).sum()
            };
            let best = (0..k).permutations(k).map(|p| cost(&p)).fold(f64::INFINITY, f64::min);
            let got = match_components(&a, &b).unwrap();
            assert!((cost(&got) - best).abs() <= 1e-12 * (1.0 + best));
        }
    }

    #[test]
    fn decomposition_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_mixture(&mut rng, 3, 2);
        let z = decomposed_forgetting(&a, &a).unwrap();
        assert_eq!(z.total(), 0.0);
        // Relabeling the replay does not change the decomposition.
        let b = random_mixture(&mut rng, 3, 2);
        let d1 = decomposed_forgetting(&a, &b).unwrap();
        let d2 = decomposed_forgetting(&a.permuted(&[2, 0, 1]), &b).unwrap();
        assert!((d1.total() - d2.total()).abs() < 1e-12);
    }

    #[test]
    fn decomposition_hand_value() {
        let a = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![4.0])],
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)],
        )
        .unwrap();
        let b = GaussianMixture::new(
            vec![0.25, 0.75],
            vec![DVector::from_vec(vec![5.0]), DVector::from_vec(vec![1.0])],
            vec![DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 1.0)],
        )
        .unwrap();
        // Matching: a0 <-> b1 (dist 1), a1 <-> b0 (dist 1).
        let d = decomposed_forgetting(&a, &b).unwrap();
        assert!((d.mean - (0.75 * 1.0 + 0.5 * 1.0)).abs() < 1e-14);
        assert!((d.cov - 0.5 * 1.0).abs() < 1e-14);
        assert!((d.weight - (0.0625 * 2.0)).abs() < 1e-14);
    }

    #[test]
    fn age_curve_counts_and_constant() {
        let records: Vec<_> = (1..=10).flat_map(|n| (1..=n).map(move |m| rec(m, n, 0.3))).collect();
        assert_eq!(records.len(), 55);
        let c = age_curve(&records);
        assert_eq!(c.ages, (0..10).collect::<Vec<_>>());
        assert_eq!(c.counts, (1..=10).rev().collect::<Vec<_>>());
        assert!(c.values.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert_eq!(half_life(&c, 0.5), None);
        assert_eq!(half_life(&c, 0.25), Some(0));
    }

    #[test]
    fn flagged_records_are_skipped() {
        let mut records = vec![rec(1, 1, 0.0), rec(1, 2, 0.8), rec(2, 2, 0.0)];
        records.push(ForgettingRecord { m: 3, n: 4, f_raw: 1.0, f_norm: None, decomposition: None });
        let c = age_curve(&records);
        assert_eq!(c.skipped, 1);
        assert_eq!(c.counts, vec![2, 1]);
        assert_eq!(half_life(&c, 0.5), Some(1));
    }

    #[test]
    fn all_zero_curve_has_no_half_life() {
        let c = age_curve(&[rec(1, 1, 0.0), rec(1, 2, 0.0)]);
        assert_eq!(half_life(&c, 0.5), None);
    }

    #[test]
    fn shares_sum_to_one() {
        let d = |mean, cov, weight| Some(Decomposition { mean, cov, weight });
        let mut records = vec![rec(1, 2, 1.0), rec(1, 3, 1.0), rec(1, 1, 0.0)];
        records[0].decomposition = d(3.0, 1.0, 0.0);
        records[1].decomposition = d(1.0, 1.0, 0.0);
        records[2].decomposition = d(0.0, 0.0, 0.0);
        let s = channel_shares(&records).unwrap();
        assert!((s.mean - (0.75 + 0.5) / 2.0).abs() < 1e-15);
        assert!((s.mean + s.cov + s.weight - 1.0).abs() < 1e-15);
        assert!(channel_shares(&[rec(1, 1, 0.0)]).is_none());
    }

    #[test]
    fn small_matrix_has_zero_diagonal() {
        let prior = iso(&[0.0, 0.0], 1.0);
        let targets: Vec<_> = (0..12).map(|i| iso(&[(i as f64).cos(), (i as f64).sin()], 0.5)).collect();
        let recs = forgetting_matrix(&prior, &targets, 4, true).unwrap();
        assert_eq!(recs.len(), 78);
        for r in recs.iter().filter(|r| r.m == r.n) {
            assert_eq!(r.f_raw, 0.0);
            assert_eq!(r.decomposition.unwrap().total(), 0.0);
        }
        assert!(recs.iter().all(|r| r.f_raw >= 0.0 && r.f_norm.is_some()));
    }

    #[test]
    fn csv_layout() {
        let csv = records_csv(&[rec(1, 2, 0.5)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("m,n,age,F_raw,F_norm,F_mean,F_cov,F_weight"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[..3], ["1", "2", "1"]);
        assert_eq!(row[3].parse::<f64>().unwrap(), 0.5);
        assert!(row[5].is_empty() && row[7].is_empty());
    }

    proptest! {
        #[test]
        fn age_curve_ignores_record_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut records: Vec<_> = (1..=8)
                .flat_map(|n| (1..=n).map(move |m| (m, n)))
                .map(|(m, n)| rec(m, n, rand::Rng::gen_range(&mut rng, 0.0..2.0)))
                .collect();
            let before = age_curve(&records);
            records.shuffle(&mut rng);
            let after = age_curve(&records);
            prop_assert_eq!(&before.ages, &after.ages);
            prop_assert_eq!(&before.counts, &after.counts);
            for (x, y) in before.values.iter().zip(&after.values) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn raw_forgetting_nonnegative_and_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mixture(&mut rng, 2, 3);
            let b = random_mixture(&mut rng, 3, 3);
            let f = raw_forgetting(&a, &b).unwrap();
            prop_assert!(f >= 0.0);
            prop_assert_eq!(f, raw_forgetting(&b, &a).unwrap());
        }
    }
}

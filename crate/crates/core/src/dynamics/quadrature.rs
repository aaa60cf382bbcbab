//! Globally adaptive Gauss-Legendre quadrature on `[0, 1]`.

use std::sync::OnceLock;

use crate::error::{CasError, Result};

const ORDER: usize = 16;
const MAX_INTERVALS: usize = 4000;

/// Nodes and weights of the order-16 rule on `[-1, 1]`, by Newton iteration
/// on the Legendre recurrence.
fn rule() -> &'static ([f64; ORDER], [f64; ORDER]) {
    static RULE: OnceLock<([f64; ORDER], [f64; ORDER])> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = ORDER;
        let mut x = [0.0; ORDER];
        let mut w = [0.0; ORDER];
        for i in 0..n {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, z);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                let dz = p1 / dp;
                z -= dz;
                if dz.abs() < 1e-16 {
                    let dp = {
                        let (mut p0, mut p1) = (1.0, z);
                        for k in 2..=n {
                            let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                            p0 = p1;
                            p1 = p2;
                        }
                        n as f64 * (z * p1 - p0) / (z * z - 1.0)
                    };
                    w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
                    break;
                }
            }
            x[i] = z;
        }
        (x, w)
    })
}

/// Applies the rule on `[a, b]` to a vector-valued integrand.
fn apply<F>(f: &mut F, a: f64, b: f64, dim: usize) -> Vec<f64>
where
    F: FnMut(f64, &mut [f64]),
{
    let (x, w) = rule();
    let (half, mid) = (0.5 * (b - a), 0.5 * (a + b));
    let mut acc = vec![0.0; dim];
    let mut buf = vec![0.0; dim];
    for i in 0..ORDER {
        buf.iter_mut().for_each(|v| *v = 0.0);
        f(mid + half * x[i], &mut buf);
        for (s, v) in acc.iter_mut().zip(&buf) {
            *s += half * w[i] * v;
        }
    }
    acc
}

struct Piece {
    a: f64,
    b: f64,
    value: Vec<f64>,
    err: f64,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn refine<F>(f: &mut F, a: f64, b: f64, whole: &[f64], dim: usize) -> [Piece; 2]
where
    F: FnMut(f64, &mut [f64]),
{
    let m = 0.5 * (a + b);
    let left = apply(f, a, m, dim);
    let right = apply(f, m, b, dim);
    let sum: Vec<f64> = left.iter().zip(&right).map(|(l, r)| l + r).collect();
    // Split the discrepancy between the halves in proportion to their size.
    let err = max_abs_diff(whole, &sum);
    [
        Piece { a, b: m, value: left, err: 0.5 * err },
        Piece { a: m, b, value: right, err: 0.5 * err },
    ]
}

/// Integrates a vector-valued `f` over `[0, 1]`. `f(u, out)` adds the
/// integrand at `u` into `out`. Intervals are bisected, largest error first,
/// until the total error estimate is below `max(rel_tol * |I|, abs_tol)`
/// measured in the max norm.
pub fn integrate_unit<F>(mut f: F, dim: usize, rel_tol: f64, abs_tol: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &mut [f64]),
{
    let whole = apply(&mut f, 0.0, 1.0, dim);
    let mut pieces: Vec<Piece> = refine(&mut f, 0.0, 1.0, &whole, dim).into();
    loop {
        let total: Vec<f64> = (0..dim).map(|i| pieces.iter().map(|p| p.value[i]).sum()).collect();
        let err: f64 = pieces.iter().map(|p| p.err).sum();
        let scale = total.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if !err.is_finite() || total.iter().any(|v| !v.is_finite()) {
            return Err(CasError::Quadrature("integrand produced a non-finite value".into()));
        }
        if err <= (rel_tol * scale).max(abs_tol) {
            return Ok(total);
        }
        if pieces.len() >= MAX_INTERVALS {
            return Err(CasError::Quadrature(format!(
                "error estimate {err:e} above tolerance after {MAX_INTERVALS} intervals"
            )));
        }
        let worst = pieces
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.err.total_cmp(&b.1.err))
            .map(|(i, _)| i)
            .expect("at least one interval");
        let p = pieces.swap_remove(worst);
        pieces.extend(refine(&mut f, p.a, p.b, &p.value, dim));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_integrates_polynomials_exactly() {
        for deg in 0..2 * ORDER {
            let got = apply(&mut |x: f64, out: &mut [f64]| out[0] += x.powi(deg as i32), 0.0, 1.0, 1)[0];
            let exact = 1.0 / (deg as f64 + 1.0);
            assert!((got - exact).abs() < 1e-14, "degree {deg}: {got} vs {exact}");
        }
    }

    #[test]
    fn weights_sum_to_two() {
        let (_, w) = rule();
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn handles_endpoint_singularity() {
        // Integral of u^{-1/2} over [0, 1] is 2.
        let v = integrate_unit(|u, out| out[0] += u.powf(-0.5), 1, 1e-10, 1e-14).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn vector_valued_and_peaked() {
        let v = integrate_unit(
            |u, out| {
                out[0] += (-(u - 0.3).powi(2) / 1e-4).exp();
                out[1] += u.cos();
            },
            2,
            1e-12,
            1e-15,
        )
        .unwrap();
        let gauss = (std::f64::consts::PI * 1e-4).sqrt();
        assert!((v[0] - gauss).abs() < 1e-12);
        assert!((v[1] - 1f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_an_error() {
        let r = integrate_unit(|_, out| out[0] += f64::NAN, 1, 1e-8, 0.0);
        assert!(matches!(r, Err(CasError::Quadrature(_))));
    }
}

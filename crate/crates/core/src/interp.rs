//! Barycentric rational interpolation of time series.
//!
//! Two families: AAA (greedy support selection with least-squares weights
//! from the Loewner matrix) and Floater-Hormann (blended local polynomials,
//! pole-free on the real line). Derivatives come from evaluating the
//! barycentric formula in truncated power-series arithmetic.

use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::series::Series;

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("sample times must be distinct")]
    DuplicateTimes,
    #[error("evaluation point is at or near a pole of the interpolant")]
    Pole,
}

/// Interpolation scheme selector, in the order the pipeline tries them.
#[derive(Clone, Debug, PartialEq)]
pub enum SchemeSpec {
    Aaa { tol: f64, max_support: usize },
    FloaterHormann { degree: usize },
}

impl SchemeSpec {
    /// Default ladder: AAA first, then Floater-Hormann of orders 3, 6, 8.
    pub fn default_ladder() -> Vec<SchemeSpec> {
        vec![
            SchemeSpec::Aaa {
                tol: 1e-13,
                max_support: usize::MAX,
            },
            SchemeSpec::FloaterHormann { degree: 3 },
            SchemeSpec::FloaterHormann { degree: 6 },
            SchemeSpec::FloaterHormann { degree: 8 },
        ]
    }

    pub fn fit(&self, times: &[f64], values: &[f64]) -> Result<BarycentricInterpolant, InterpError> {
        match self {
            SchemeSpec::Aaa { tol, max_support } => {
                aaa_fit(times, values, *tol, (*max_support).min(times.len()))
            }
            SchemeSpec::FloaterHormann { degree } => fh_fit(times, values, *degree),
        }
    }
}

impl fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeSpec::Aaa { .. } => write!(f, "aaa"),
            SchemeSpec::FloaterHormann { degree } => write!(f, "fh{degree}"),
        }
    }
}

/// A rational interpolant in barycentric form:
/// `r(t) = sum_j w_j f_j / (t - z_j) / sum_j w_j / (t - z_j)`.
#[derive(Clone, Debug)]
pub struct BarycentricInterpolant {
    support: Vec<f64>,
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl BarycentricInterpolant {
    pub fn new(support: Vec<f64>, values: Vec<f64>, weights: Vec<f64>) -> Self {
        assert_eq!(support.len(), values.len());
        assert_eq!(support.len(), weights.len());
        assert!(!support.is_empty());
        assert!(weights.iter().any(|w| *w != 0.0));
        BarycentricInterpolant {
            support,
            values,
            weights,
        }
    }

    pub fn support_points(&self) -> &[f64] {
        &self.support
    }

    pub fn support_values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn nearest_support(&self, t: f64) -> usize {
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for (j, z) in self.support.iter().enumerate() {
            let d = (t - z).abs();
            if d < dist {
                dist = d;
                best = j;
            }
        }
        best
    }

    /// Point evaluation. Exact support hits return the stored value.
    pub fn eval(&self, t: f64) -> f64 {
        if let Some(j) = self.support.iter().position(|z| *z == t) {
            if self.weights[j] != 0.0 {
                return self.values[j];
            }
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..self.support.len() {
            let c = self.weights[j] / (t - self.support[j]);
            num += c * self.values[j];
            den += c;
        }
        num / den
    }

    /// Derivative values `r^(k)(t)` for `k = 0..=order` via power-series
    /// evaluation of the barycentric formula.
    ///
    /// Numerator and denominator are first multiplied through by
    /// `(t - z_near + eps)` for the nearest support point, which removes the
    /// dominant simple pole from both series and keeps the division
    /// well-conditioned arbitrarily close to support points.
    pub fn taylor_eval(&self, t: f64, order: u32) -> Result<Vec<f64>, InterpError> {
        let len = order as usize + 1;
        let near = self.nearest_support(t);
        let mut num = Series::constant(self.weights[near] * self.values[near], len);
        let mut den = Series::constant(self.weights[near], len);
        let p_near = Series::from_coeffs({
            let mut c = vec![0.0; len];
            c[0] = t - self.support[near];
            if len > 1 {
                c[1] = 1.0;
            }
            c
        });
        for j in 0..self.support.len() {
            if j == near {
                continue;
            }
            let mut linear = vec![0.0; len];
            linear[0] = t - self.support[j];
            if len > 1 {
                linear[1] = 1.0;
            }
            let ratio = p_near
                .div(&Series::from_coeffs(linear))
                .map_err(|_| InterpError::Pole)?;
            num = num.add(&ratio.scale(self.weights[j] * self.values[j]));
            den = den.add(&ratio.scale(self.weights[j]));
        }
        let r = num.div(&den).map_err(|_| InterpError::Pole)?;
        Ok(r.derivative_values())
    }
}

/// Moves an evaluation point off interpolant support points: a point within
/// `1e-8 * span` of a support point is shifted by `1e-6 * span` away from it,
/// clamped to the data interval `[lo, hi]`.
pub fn nudge_eval_point(r: &BarycentricInterpolant, t: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let near = r.nearest_support(t);
    let dist = t - r.support[near];
    if dist.abs() > 1e-8 * span {
        return t;
    }
    let step = 1e-6 * span;
    let direction = if dist != 0.0 {
        dist.signum()
    } else if t + step <= hi {
        1.0
    } else {
        -1.0
    };
    let mut shifted = t + direction * step;
    if shifted > hi || shifted < lo {
        shifted = t - direction * step;
    }
    shifted
}

/// AAA rational approximation: greedy support selection, weights from the
/// smallest right singular vector of the Loewner matrix. Stops when the
/// worst relative residual on non-support points drops below `tol` or the
/// support reaches `mmax` points.
pub fn aaa_fit(
    times: &[f64],
    values: &[f64],
    tol: f64,
    mmax: usize,
) -> Result<BarycentricInterpolant, InterpError> {
    let n = times.len();
    if n < 2 {
        return Err(InterpError::TooFewSamples { need: 2, got: n });
    }
    assert_eq!(n, values.len());
    for i in 0..n {
        for j in i + 1..n {
            if times[i] == times[j] {
                return Err(InterpError::DuplicateTimes);
            }
        }
    }

    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return Ok(BarycentricInterpolant::new(
            vec![times[0]],
            vec![0.0],
            vec![1.0],
        ));
    }

    // At least one non-support point is needed for the least-squares weights.
    let mmax = mmax.clamp(1, n - 1);
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut residual: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let mut in_support = vec![false; n];
    let mut support_idx: Vec<usize> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();

    loop {
        let (next, err) = residual
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_support[*i])
            .map(|(i, r)| (i, r.abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-support set is never empty");
        if !support_idx.is_empty() && err <= tol * scale {
            break;
        }
        if support_idx.len() == mmax {
            break;
        }
        in_support[next] = true;
        support_idx.push(next);
        let m = support_idx.len();

        // Loewner matrix over the non-support rows; padded square when wide
        // so the full right singular basis is available.
        let free: Vec<usize> = (0..n).filter(|i| !in_support[*i]).collect();
        let rows = free.len().max(m);
        let mut a = DMatrix::<f64>::zeros(rows, m);
        for (r, &i) in free.iter().enumerate() {
            for (c, &j) in support_idx.iter().enumerate() {
                a[(r, c)] = (values[i] - values[j]) / (times[i] - times[j]);
            }
        }
        let svd = a.svd(false, true);
        let v_t = svd.v_t.as_ref().expect("svd computed with V");
        let smax = svd.singular_values.iter().fold(0.0f64, |acc, s| acc.max(*s));
        let null_rows: Vec<usize> = svd
            .singular_values
            .iter()
            .enumerate()
            .filter(|(_, s)| **s <= 1e-13 * smax.max(f64::MIN_POSITIVE))
            .map(|(i, _)| i)
            .collect();
        weights = if null_rows.len() >= 2 {
            // Underdetermined weights: every nullspace vector interpolates.
            // Pick the one with zero weight sum, which kills the leading
            // denominator coefficient and yields the unique interpolant of
            // minimal denominator degree.
            let basis: Vec<Vec<f64>> = null_rows
                .iter()
                .map(|&r| (0..m).map(|c| v_t[(r, c)]).collect())
                .collect();
            let coeff_sums: Vec<f64> = basis.iter().map(|b| b.iter().sum()).collect();
            let norm2: f64 = coeff_sums.iter().map(|c| c * c).sum();
            let q: Vec<f64> = if norm2 <= f64::MIN_POSITIVE {
                let mut q = vec![0.0; basis.len()];
                q[0] = 1.0;
                q
            } else {
                let pivot = coeff_sums
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .map(|(i, _)| i)
                    .unwrap();
                let mut q: Vec<f64> = coeff_sums
                    .iter()
                    .map(|c| -coeff_sums[pivot] * c / norm2)
                    .collect();
                q[pivot] += 1.0;
                let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                q.iter_mut().for_each(|v| *v /= qn);
                q
            };
            (0..m)
                .map(|c| q.iter().zip(&basis).map(|(qk, b)| qk * b[c]).sum())
                .collect()
        } else {
            let min_idx = svd
                .singular_values
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            (0..m).map(|c| v_t[(min_idx, c)]).collect()
        };

        // Residual update on the free points.
        for &i in &free {
            let mut num = 0.0;
            let mut den = 0.0;
            for (c, &j) in support_idx.iter().enumerate() {
                let w = weights[c] / (times[i] - times[j]);
                num += w * values[j];
                den += w;
            }
            residual[i] = if den != 0.0 {
                values[i] - num / den
            } else {
                f64::INFINITY
            };
        }
    }

    Ok(BarycentricInterpolant::new(
        support_idx.iter().map(|&i| times[i]).collect(),
        support_idx.iter().map(|&i| values[i]).collect(),
        weights,
    ))
}

/// Floater-Hormann interpolant of blending degree `d`: reproduces
/// polynomials of degree <= d and has no poles on the real line.
pub fn fh_fit(
    times: &[f64],
    values: &[f64],
    d: usize,
) -> Result<BarycentricInterpolant, InterpError> {
    let n = times.len();
    if n < d + 1 || n < 2 {
        return Err(InterpError::TooFewSamples {
            need: (d + 1).max(2),
            got: n,
        });
    }
    assert_eq!(n, values.len());
    for i in 0..n {
        for j in i + 1..n {
            if times[i] == times[j] {
                return Err(InterpError::DuplicateTimes);
            }
        }
    }

    // w_k = sum_{i in J_k} (-1)^i prod_{j=i..i+d, j!=k} 1/(z_k - z_j),
    // J_k = { i : 0 <= i <= n-1-d, k-d <= i <= k }.
    let mut weights = vec![0.0; n];
    for k in 0..n {
        let lo = k.saturating_sub(d);
        let hi = k.min(n - 1 - d);
        let mut acc = 0.0;
        for i in lo..=hi {
            let mut prod = 1.0;
            for j in i..=i + d {
                if j == k {
                    continue;
                }
                prod /= times[k] - times[j];
            }
            acc += if i % 2 == 0 { prod } else { -prod };
        }
        weights[k] = acc;
    }

    Ok(BarycentricInterpolant::new(
        times.to_vec(),
        values.to_vec(),
        weights,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    fn paper_target(t: f64) -> f64 {
        (0.58 * t * t - 3.11 * t + 6.82) / (t + 3.41)
    }

    #[test]
    fn aaa_recovers_rational_target() {
        let times = grid(0.0, 1.0, 21);
        let values: Vec<f64> = times.iter().map(|&t| paper_target(t)).collect();
        let r = aaa_fit(&times, &values, 1e-13, times.len()).unwrap();
        for i in 0..100 {
            let t = 0.005 + 0.99 * i as f64 / 99.0;
            let got = r.eval(t);
            let expect = paper_target(t);
            assert!(
                (got - expect).abs() <= 1e-9 * expect.abs(),
                "t={t}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn aaa_constant_data() {
        let times = grid(0.0, 1.0, 8);
        let values = vec![2.5; 8];
        let r = aaa_fit(&times, &values, 1e-13, 8).unwrap();
        assert_eq!(r.eval(0.37), 2.5);
        let derivs = r.taylor_eval(0.37, 5).unwrap();
        assert_eq!(derivs[0], 2.5);
        for k in 1..=5 {
            assert_eq!(derivs[k], 0.0);
        }
    }

    #[test]
    fn aaa_toy_dataset_derivatives() {
        let times = vec![0.000, 0.333, 0.666, 1.000];
        let values = vec![2.000, 1.563, 1.229, 0.974];
        let r = aaa_fit(&times, &values, 1e-13, 4).unwrap();
        assert_eq!(r.eval(0.0), 2.000);
        let t = nudge_eval_point(&r, 0.0, 0.0, 1.0);
        let derivs = r.taylor_eval(t, 2).unwrap();
        assert!((derivs[0] - 2.000).abs() <= 2e-2, "r(0) = {}", derivs[0]);
        assert!((derivs[1] + 1.50).abs() <= 2e-2, "r'(0) = {}", derivs[1]);
        assert!((derivs[2] - 1.22).abs() <= 2e-2, "r''(0) = {}", derivs[2]);
    }

    #[test]
    fn aaa_exact_recovery_of_random_low_order_rationals() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..10 {
            // Type (2,2) rational with a denominator kept away from zero.
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let f = |t: f64| {
                (a[0] + a[1] * t + a[2] * t * t) / (1.0 + b[0] * t + b[1] * t * t)
            };
            let times = grid(-0.5, 0.5, 21);
            let values: Vec<f64> = times.iter().map(|&t| f(t)).collect();
            let r = aaa_fit(&times, &values, 1e-13, times.len()).unwrap();
            let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..50 {
                let t = -0.49 + 0.98 * i as f64 / 49.0;
                assert!(
                    (r.eval(t) - f(t)).abs() <= 1e-9 * scale,
                    "off-sample mismatch at {t}"
                );
            }
        }
    }

    #[test]
    fn interpolation_condition_holds() {
        let mut rng = StdRng::seed_from_u64(3);
        let times = grid(-0.5, 0.5, 15);
        let values: Vec<f64> = times.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
        for r in [
            aaa_fit(&times, &values, 1e-13, times.len()).unwrap(),
            fh_fit(&times, &values, 3).unwrap(),
            fh_fit(&times, &values, 8).unwrap(),
        ] {
            for (j, z) in r.support_points().iter().enumerate() {
                if r.weights()[j] == 0.0 {
                    continue;
                }
                let f = r.support_values()[j];
                assert!(
                    (r.eval(*z) - f).abs() <= 1e-12 * (1.0 + f.abs()),
                    "interpolation condition violated at z={z}"
                );
            }
        }
    }

    #[test]
    fn fh_reproduces_cubic_exactly() {
        let times = grid(0.0, 1.0, 10);
        let values: Vec<f64> = times.iter().map(|&t| t * t * t).collect();
        let r = fh_fit(&times, &values, 3).unwrap();
        for i in 0..40 {
            let t = 0.0125 + 0.975 * i as f64 / 39.0;
            assert!(
                (r.eval(t) - t * t * t).abs() <= 1e-12,
                "cubic not reproduced at {t}"
            );
        }
    }

    #[test]
    fn fh_reproduces_polynomials_up_to_degree_d() {
        let times = grid(-1.0, 1.0, 12);
        for d in [0usize, 2, 4] {
            for deg in 0..=d {
                let values: Vec<f64> = times.iter().map(|&t| t.powi(deg as i32)).collect();
                let r = fh_fit(&times, &values, d).unwrap();
                for i in 0..30 {
                    let t = -0.98 + 1.96 * i as f64 / 29.0;
                    assert!(
                        (r.eval(t) - t.powi(deg as i32)).abs() <= 1e-11,
                        "d={d} deg={deg} t={t}"
                    );
                }
            }
        }
    }

    #[test]
    fn fh_degree_zero_on_two_points() {
        let r = fh_fit(&[0.0, 1.0], &[3.0, 5.0], 0).unwrap();
        assert_eq!(r.eval(0.0), 3.0);
        assert_eq!(r.eval(1.0), 5.0);
    }

    #[test]
    fn fh_higher_order_beats_lower_on_runge() {
        // The sample density must resolve the poles at +-0.2i before the
        // O(h^(d+1)) order shows; 41 points on this interval are enough.
        let f = |t: f64| 1.0 / (1.0 + 25.0 * t * t);
        let times = grid(-0.5, 0.5, 41);
        let values: Vec<f64> = times.iter().map(|&t| f(t)).collect();
        let err = |r: &BarycentricInterpolant| {
            let mut worst = 0.0f64;
            for i in 0..200 {
                let t = -0.495 + 0.99 * i as f64 / 199.0;
                worst = worst.max((r.eval(t) - f(t)).abs());
            }
            worst
        };
        let e3 = err(&fh_fit(&times, &values, 3).unwrap());
        let e8 = err(&fh_fit(&times, &values, 8).unwrap());
        assert!(e8 < e3, "d=8 error {e8} not below d=3 error {e3}");
    }

    #[test]
    fn taylor_eval_matches_analytic_derivatives() {
        // f(t) = 1/(t+2): f^(k)(0.5) = (-1)^k k! / 2.5^(k+1).
        let f = |t: f64| 1.0 / (t + 2.0);
        let times = grid(0.0, 1.0, 21);
        let values: Vec<f64> = times.iter().map(|&t| f(t)).collect();
        let r = aaa_fit(&times, &values, 1e-13, times.len()).unwrap();
        let t = nudge_eval_point(&r, 0.5, 0.0, 1.0);
        let derivs = r.taylor_eval(t, 4).unwrap();
        let mut fact = 1.0;
        for k in 0..=4usize {
            if k > 0 {
                fact *= k as f64;
            }
            let expect = if k % 2 == 0 { 1.0 } else { -1.0 } * fact / 2.5f64.powi(k as i32 + 1);
            assert!(
                (derivs[k] - expect).abs() <= 1e-7 * expect.abs(),
                "k={k}: {} vs {expect}",
                derivs[k]
            );
        }
    }

    #[test]
    fn taylor_eval_first_derivative_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(23);
        let times = grid(-0.5, 0.5, 21);
        let values: Vec<f64> = times.iter().map(|&t| (2.0 * t).sin() + 0.3 * t).collect();
        let r = aaa_fit(&times, &values, 1e-13, times.len()).unwrap();
        for _ in 0..10 {
            let t = rng.gen_range(-0.45..0.45);
            let t = nudge_eval_point(&r, t, -0.5, 0.5);
            let d1 = r.taylor_eval(t, 1).unwrap()[1];
            let h = 1e-5;
            let fd = (r.eval(t + h) - r.eval(t - h)) / (2.0 * h);
            assert!(
                (d1 - fd).abs() <= 1e-6 * (1.0 + d1.abs()),
                "t={t}: {d1} vs {fd}"
            );
        }
    }

    #[test]
    fn taylor_eval_is_stable_next_to_support_points() {
        // Derivatives evaluated 1e-6 away from a support point must agree
        // with the analytic derivatives of the recovered rational.
        let f = |t: f64| (0.58 * t * t - 3.11 * t + 6.82) / (t + 3.41);
        let times = grid(0.0, 1.0, 21);
        let values: Vec<f64> = times.iter().map(|&t| f(t)).collect();
        let r = aaa_fit(&times, &values, 1e-13, times.len()).unwrap();
        let z = r.support_points()[0];
        let t = z + 1e-6;
        let derivs = r.taylor_eval(t, 4).unwrap();
        // Analytic derivatives by series division of the target itself.
        let num = Series::from_coeffs(vec![
            0.58 * t * t - 3.11 * t + 6.82,
            1.16 * t - 3.11,
            0.58,
            0.0,
            0.0,
        ]);
        let den = Series::from_coeffs(vec![t + 3.41, 1.0, 0.0, 0.0, 0.0]);
        let expect = num.div(&den).unwrap().derivative_values();
        for k in 0..=4usize {
            assert!(
                (derivs[k] - expect[k]).abs() <= 1e-6 * (1.0 + expect[k].abs()),
                "k={k}: {} vs {}",
                derivs[k],
                expect[k]
            );
        }
    }

    #[test]
    fn nudge_rules() {
        let r = BarycentricInterpolant::new(vec![0.0, 0.3, 1.0], vec![1.0, 2.0, 3.0], vec![1.0, -2.0, 1.0]);
        // Support hit at the left end moves right by 1e-6 * span.
        assert_eq!(nudge_eval_point(&r, 0.0, 0.0, 1.0), 1e-6);
        // Far from support: unchanged.
        assert_eq!(nudge_eval_point(&r, 0.5, 0.0, 1.0), 0.5);
        // Right-endpoint support moves left, staying inside the span.
        assert_eq!(nudge_eval_point(&r, 1.0, 0.0, 1.0), 1.0 - 1e-6);
    }

    #[test]
    fn pole_is_detected() {
        // Weights engineered so the denominator vanishes between supports.
        let r = BarycentricInterpolant::new(vec![0.0, 1.0], vec![1.0, -1.0], vec![1.0, 1.0]);
        // den(t) = 1/t + 1/(t-1) = 0 at t = 0.5.
        let err = r.taylor_eval(0.5, 2);
        assert!(matches!(err, Err(InterpError::Pole)));
    }
}

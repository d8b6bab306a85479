//! Truncated power-series arithmetic over f64.
//!
//! A `Series` holds coefficients `[a0, a1, ..., aN]` of a polynomial in a
//! local variable, truncated at fixed length. Used to extract high-order
//! derivatives of barycentric interpolants and to run the Taylor recurrence
//! for ODE solutions.

use std::collections::HashMap;

use thiserror::Error;

use crate::expr::{Expr, Symbol};

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("series division by a series vanishing at the expansion point")]
    Pole,
    #[error("symbol `{0}` has no series binding")]
    Unbound(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    coeffs: Vec<f64>,
}

impl Series {
    pub fn constant(value: f64, len: usize) -> Self {
        assert!(len >= 1);
        let mut coeffs = vec![0.0; len];
        coeffs[0] = value;
        Series { coeffs }
    }

    /// The series `value + epsilon`.
    pub fn variable(value: f64, len: usize) -> Self {
        let mut s = Series::constant(value, len);
        if len > 1 {
            s.coeffs[1] = 1.0;
        }
        s
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Self {
        assert!(!coeffs.is_empty());
        Series { coeffs }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeff(&self, k: usize) -> f64 {
        self.coeffs.get(k).copied().unwrap_or(0.0)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Derivative values `k! * a_k` for `k = 0..len`.
    pub fn derivative_values(&self) -> Vec<f64> {
        let mut fact = 1.0;
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, a)| {
                if k > 0 {
                    fact *= k as f64;
                }
                a * fact
            })
            .collect()
    }

    pub fn add(&self, other: &Series) -> Series {
        let n = self.len().max(other.len());
        let coeffs = (0..n).map(|k| self.coeff(k) + other.coeff(k)).collect();
        Series { coeffs }
    }

    pub fn sub(&self, other: &Series) -> Series {
        let n = self.len().max(other.len());
        let coeffs = (0..n).map(|k| self.coeff(k) - other.coeff(k)).collect();
        Series { coeffs }
    }

    pub fn neg(&self) -> Series {
        Series {
            coeffs: self.coeffs.iter().map(|a| -a).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Series {
        Series {
            coeffs: self.coeffs.iter().map(|a| c * a).collect(),
        }
    }

    pub fn mul(&self, other: &Series) -> Series {
        let n = self.len().max(other.len());
        let mut coeffs = vec![0.0; n];
        for (i, a) in self.coeffs.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for (j, b) in other.coeffs.iter().enumerate() {
                if i + j >= n {
                    break;
                }
                coeffs[i + j] += a * b;
            }
        }
        Series { coeffs }
    }

    /// Series division. Fails when the divisor's constant term is zero
    /// relative to the magnitude of its coefficients.
    pub fn div(&self, other: &Series) -> Result<Series, SeriesError> {
        let n = self.len().max(other.len());
        let d0 = other.coeff(0);
        let scale: f64 = other.coeffs.iter().map(|c| c.abs()).sum::<f64>().max(1e-300);
        if d0 == 0.0 || d0.abs() < 1e-13 * scale {
            return Err(SeriesError::Pole);
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            let mut acc = self.coeff(k);
            for j in 0..k {
                acc -= out[j] * other.coeff(k - j);
            }
            out[k] = acc / d0;
        }
        Ok(Series { coeffs: out })
    }

    pub fn powi(&self, k: i32) -> Result<Series, SeriesError> {
        let n = self.len();
        if k == 0 {
            return Ok(Series::constant(1.0, n));
        }
        let mut base = self.clone();
        if k < 0 {
            base = Series::constant(1.0, n).div(&base)?;
        }
        let mut result = Series::constant(1.0, n);
        for _ in 0..k.unsigned_abs() {
            result = result.mul(&base);
        }
        Ok(result)
    }

    pub fn truncate(&self, len: usize) -> Series {
        let mut coeffs = self.coeffs.clone();
        coeffs.truncate(len.max(1));
        coeffs.resize(len.max(1), 0.0);
        Series { coeffs }
    }
}

/// Evaluates an expression with series-valued symbol bindings. All series in
/// `env` must share one truncation length.
pub fn eval_expr_series(
    e: &Expr,
    env: &HashMap<Symbol, Series>,
    len: usize,
) -> Result<Series, SeriesError> {
    match e {
        Expr::Const(c) => Ok(Series::constant(c.to_f64(), len)),
        Expr::Sym(s) => env
            .get(s)
            .map(|series| series.truncate(len))
            .ok_or_else(|| SeriesError::Unbound(s.as_str().to_owned())),
        Expr::Sum(xs) => {
            let mut acc = Series::constant(0.0, len);
            for x in xs {
                acc = acc.add(&eval_expr_series(x, env, len)?);
            }
            Ok(acc)
        }
        Expr::Prod(xs) => {
            let mut acc = Series::constant(1.0, len);
            for x in xs {
                acc = acc.mul(&eval_expr_series(x, env, len)?);
            }
            Ok(acc)
        }
        Expr::Neg(x) => Ok(eval_expr_series(x, env, len)?.neg()),
        Expr::Div(a, b) => {
            let num = eval_expr_series(a, env, len)?;
            let den = eval_expr_series(b, env, len)?;
            num.div(&den)
        }
        Expr::Pow(b, k) => eval_expr_series(b, env, len)?.powi(*k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_series_via_division() {
        // 1/(1-eps) = 1 + eps + eps^2 + ...
        let one = Series::constant(1.0, 6);
        let den = Series::from_coeffs(vec![1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        let q = one.div(&den).unwrap();
        for k in 0..6 {
            assert!((q.coeff(k) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn division_detects_pole() {
        let one = Series::constant(1.0, 4);
        let den = Series::from_coeffs(vec![0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(one.div(&den), Err(SeriesError::Pole)));
    }

    #[test]
    fn negative_power() {
        // (1 + eps)^-2 = 1 - 2 eps + 3 eps^2 - 4 eps^3
        let s = Series::from_coeffs(vec![1.0, 1.0, 0.0, 0.0]);
        let p = s.powi(-2).unwrap();
        let expect = [1.0, -2.0, 3.0, -4.0];
        for (k, e) in expect.iter().enumerate() {
            assert!((p.coeff(k) - e).abs() < 1e-13, "k={k}");
        }
    }

    #[test]
    fn derivative_values_apply_factorials() {
        let s = Series::from_coeffs(vec![2.0, 3.0, 4.0, 5.0]);
        let d = s.derivative_values();
        assert_eq!(d, vec![2.0, 3.0, 8.0, 30.0]);
    }

    #[test]
    fn expression_evaluation_on_series() {
        // f(x) = x^2 + x at x = 1 + eps: value 2, derivative 3, half-second 1.
        let e = Expr::sym("x").pow_i(2) + Expr::sym("x");
        let mut env = HashMap::new();
        env.insert(Symbol::new("x"), Series::variable(1.0, 3));
        let s = eval_expr_series(&e, &env, 3).unwrap();
        assert!((s.coeff(0) - 2.0).abs() < 1e-14);
        assert!((s.coeff(1) - 3.0).abs() < 1e-14);
        assert!((s.coeff(2) - 1.0).abs() < 1e-14);
    }
}

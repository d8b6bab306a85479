//! Expression trees for rational functions over model symbols.
//!
//! Expressions are immutable after construction. Numeric literals parsed from
//! model text are kept as exact rationals; floating-point constants only enter
//! when numeric values are substituted into a system. Arithmetic on mixed
//! rational/float constants promotes to float.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

/// An interned symbol name. Cheap to clone and compare.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Symbol(Arc<str>);

impl Symbol {
    pub fn new(name: impl AsRef<str>) -> Self {
        Symbol(Arc::from(name.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`", self.0)
    }
}

impl From<&str> for Symbol {
    fn from(s: &str) -> Self {
        Symbol::new(s)
    }
}

impl From<String> for Symbol {
    fn from(s: String) -> Self {
        Symbol::new(s)
    }
}

/// A numeric constant: exact rational or binary float.
#[derive(Clone, Debug)]
pub enum Number {
    Rational(BigRational),
    Real(f64),
}

impl Number {
    pub fn from_int(n: i64) -> Self {
        Number::Rational(BigRational::from_integer(BigInt::from(n)))
    }

    pub fn ratio(num: i64, den: i64) -> Self {
        assert!(den != 0, "rational constant with zero denominator");
        Number::Rational(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Number::Rational(r) => r.to_f64().unwrap_or(f64::NAN),
            Number::Real(x) => *x,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Number::Rational(r) => r.is_zero(),
            Number::Real(x) => *x == 0.0,
        }
    }

    pub fn is_one(&self) -> bool {
        match self {
            Number::Rational(r) => r.is_one(),
            Number::Real(x) => *x == 1.0,
        }
    }

    fn binop(
        a: &Number,
        b: &Number,
        exact: impl Fn(&BigRational, &BigRational) -> BigRational,
        approx: impl Fn(f64, f64) -> f64,
    ) -> Number {
        match (a, b) {
            (Number::Rational(x), Number::Rational(y)) => Number::Rational(exact(x, y)),
            _ => Number::Real(approx(a.to_f64(), b.to_f64())),
        }
    }

    pub fn add(&self, other: &Number) -> Number {
        Number::binop(self, other, |a, b| a + b, |a, b| a + b)
    }

    pub fn mul(&self, other: &Number) -> Number {
        Number::binop(self, other, |a, b| a * b, |a, b| a * b)
    }

    /// Exact division; `None` when the divisor is zero.
    pub fn div(&self, other: &Number) -> Option<Number> {
        if other.is_zero() {
            return None;
        }
        Some(Number::binop(self, other, |a, b| a / b, |a, b| a / b))
    }

    pub fn neg(&self) -> Number {
        match self {
            Number::Rational(r) => Number::Rational(-r),
            Number::Real(x) => Number::Real(-x),
        }
    }

    /// Integer power; `None` for 0 raised to a negative exponent.
    pub fn powi(&self, k: i32) -> Option<Number> {
        if k < 0 && self.is_zero() {
            return None;
        }
        Some(match self {
            Number::Rational(r) => {
                let p = r.pow(k.unsigned_abs() as i32);
                if k < 0 {
                    Number::Rational(p.recip())
                } else {
                    Number::Rational(p)
                }
            }
            Number::Real(x) => Number::Real(x.powi(k)),
        })
    }
}

impl PartialEq for Number {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Number::Rational(a), Number::Rational(b)) => a == b,
            (Number::Real(a), Number::Real(b)) => a.to_bits() == b.to_bits(),
            _ => false,
        }
    }
}

impl Eq for Number {}

impl Hash for Number {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match self {
            Number::Rational(r) => {
                0u8.hash(state);
                r.hash(state);
            }
            Number::Real(x) => {
                1u8.hash(state);
                x.to_bits().hash(state);
            }
        }
    }
}

impl fmt::Display for Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Number::Rational(r) => {
                if r.denom().is_one() {
                    write!(f, "{}", r.numer())
                } else {
                    write!(f, "{}/{}", r.numer(), r.denom())
                }
            }
            Number::Real(x) => write!(f, "{x:?}"),
        }
    }
}

/// A rational expression over symbols: field operations plus integer powers.
#[derive(Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Const(Number),
    Sym(Symbol),
    Sum(Vec<Expr>),
    Prod(Vec<Expr>),
    Neg(Box<Expr>),
    /// Quotient; the denominator is syntactically nonzero by construction.
    Div(Box<Expr>, Box<Expr>),
    /// Integer power (negative exponents allowed).
    Pow(Box<Expr>, i32),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("symbol `{0}` is not bound")]
    Unbound(String),
    #[error("division by zero while evaluating `{0}`")]
    Pole(String),
}

pub type Bindings = HashMap<Symbol, f64>;

impl Expr {
    pub fn int(n: i64) -> Expr {
        Expr::Const(Number::from_int(n))
    }

    pub fn rational(num: i64, den: i64) -> Expr {
        Expr::Const(Number::ratio(num, den))
    }

    pub fn real(x: f64) -> Expr {
        Expr::Const(Number::Real(x))
    }

    pub fn sym(s: impl Into<Symbol>) -> Expr {
        Expr::Sym(s.into())
    }

    pub fn zero() -> Expr {
        Expr::int(0)
    }

    pub fn one() -> Expr {
        Expr::int(1)
    }

    pub fn is_zero_const(&self) -> bool {
        matches!(self, Expr::Const(c) if c.is_zero())
    }

    pub fn is_one_const(&self) -> bool {
        matches!(self, Expr::Const(c) if c.is_one())
    }

    pub fn pow_i(self, k: i32) -> Expr {
        match k {
            0 => Expr::one(),
            1 => self,
            _ => Expr::Pow(Box::new(self), k),
        }
    }

    /// Collects every symbol referenced by the expression.
    pub fn collect_symbols(&self, out: &mut BTreeSet<Symbol>) {
        match self {
            Expr::Const(_) => {}
            Expr::Sym(s) => {
                out.insert(s.clone());
            }
            Expr::Sum(xs) | Expr::Prod(xs) => {
                for x in xs {
                    x.collect_symbols(out);
                }
            }
            Expr::Neg(x) => x.collect_symbols(out),
            Expr::Div(n, d) => {
                n.collect_symbols(out);
                d.collect_symbols(out);
            }
            Expr::Pow(b, _) => b.collect_symbols(out),
        }
    }

    pub fn symbols(&self) -> BTreeSet<Symbol> {
        let mut out = BTreeSet::new();
        self.collect_symbols(&mut out);
        out
    }

    /// Evaluates with all symbols bound. Exact-zero denominators raise a pole
    /// error; saturation to non-finite values is the caller's concern.
    pub fn eval(&self, bindings: &Bindings) -> Result<f64, EvalError> {
        match self {
            Expr::Const(c) => Ok(c.to_f64()),
            Expr::Sym(s) => bindings
                .get(s)
                .copied()
                .ok_or_else(|| EvalError::Unbound(s.as_str().to_owned())),
            Expr::Sum(xs) => {
                let mut acc = 0.0;
                for x in xs {
                    acc += x.eval(bindings)?;
                }
                Ok(acc)
            }
            Expr::Prod(xs) => {
                let mut acc = 1.0;
                for x in xs {
                    acc *= x.eval(bindings)?;
                }
                Ok(acc)
            }
            Expr::Neg(x) => Ok(-x.eval(bindings)?),
            Expr::Div(n, d) => {
                let den = d.eval(bindings)?;
                if den == 0.0 {
                    return Err(EvalError::Pole(d.to_string()));
                }
                Ok(n.eval(bindings)? / den)
            }
            Expr::Pow(b, k) => {
                let base = b.eval(bindings)?;
                if *k < 0 && base == 0.0 {
                    return Err(EvalError::Pole(b.to_string()));
                }
                Ok(base.powi(*k))
            }
        }
    }

    /// Exact symbolic partial derivative with respect to `s`.
    pub fn diff(&self, s: &Symbol) -> Expr {
        match self {
            Expr::Const(_) => Expr::zero(),
            Expr::Sym(name) => {
                if name == s {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Expr::Sum(xs) => {
                let parts: Vec<Expr> = xs
                    .iter()
                    .map(|x| x.diff(s))
                    .filter(|d| !d.is_zero_const())
                    .collect();
                sum_of(parts)
            }
            Expr::Prod(xs) => {
                // Leibniz rule over the factor list.
                let mut parts = Vec::new();
                for (i, xi) in xs.iter().enumerate() {
                    let di = xi.diff(s);
                    if di.is_zero_const() {
                        continue;
                    }
                    let mut factors = Vec::with_capacity(xs.len());
                    for (j, xj) in xs.iter().enumerate() {
                        factors.push(if i == j { di.clone() } else { xj.clone() });
                    }
                    parts.push(prod_of(factors));
                }
                sum_of(parts)
            }
            Expr::Neg(x) => {
                let d = x.diff(s);
                if d.is_zero_const() {
                    d
                } else {
                    Expr::Neg(Box::new(d))
                }
            }
            Expr::Div(n, d) => {
                let dn = n.diff(s);
                let dd = d.diff(s);
                if dd.is_zero_const() {
                    if dn.is_zero_const() {
                        return Expr::zero();
                    }
                    return Expr::Div(Box::new(dn), d.clone());
                }
                // (n'd - nd')/d^2
                let num = sum_of(vec![
                    prod_of(vec![dn, (**d).clone()]),
                    Expr::Neg(Box::new(prod_of(vec![(**n).clone(), dd]))),
                ]);
                Expr::Div(Box::new(num), Box::new((**d).clone().pow_i(2)))
            }
            Expr::Pow(b, k) => {
                let db = b.diff(s);
                if db.is_zero_const() {
                    return Expr::zero();
                }
                prod_of(vec![
                    Expr::int(*k as i64),
                    (**b).clone().pow_i(*k - 1),
                    db,
                ])
            }
        }
    }

    /// Chain-rule derivation with caller-supplied symbol derivatives.
    /// `diff` is the special case mapping one symbol to 1 and the rest to 0.
    pub fn derive_with(&self, sym_derivative: &dyn Fn(&Symbol) -> Expr) -> Expr {
        match self {
            Expr::Const(_) => Expr::zero(),
            Expr::Sym(s) => sym_derivative(s),
            Expr::Sum(xs) => {
                let parts: Vec<Expr> = xs
                    .iter()
                    .map(|x| x.derive_with(sym_derivative))
                    .filter(|d| !d.is_zero_const())
                    .collect();
                sum_of(parts)
            }
            Expr::Prod(xs) => {
                let mut parts = Vec::new();
                for (i, xi) in xs.iter().enumerate() {
                    let di = xi.derive_with(sym_derivative);
                    if di.is_zero_const() {
                        continue;
                    }
                    let mut factors = Vec::with_capacity(xs.len());
                    for (j, xj) in xs.iter().enumerate() {
                        factors.push(if i == j { di.clone() } else { xj.clone() });
                    }
                    parts.push(prod_of(factors));
                }
                sum_of(parts)
            }
            Expr::Neg(x) => {
                let d = x.derive_with(sym_derivative);
                if d.is_zero_const() {
                    d
                } else {
                    Expr::Neg(Box::new(d))
                }
            }
            Expr::Div(n, d) => {
                let dn = n.derive_with(sym_derivative);
                let dd = d.derive_with(sym_derivative);
                if dd.is_zero_const() {
                    if dn.is_zero_const() {
                        return Expr::zero();
                    }
                    return Expr::Div(Box::new(dn), d.clone());
                }
                let num = sum_of(vec![
                    prod_of(vec![dn, (**d).clone()]),
                    Expr::Neg(Box::new(prod_of(vec![(**n).clone(), dd]))),
                ]);
                Expr::Div(Box::new(num), Box::new((**d).clone().pow_i(2)))
            }
            Expr::Pow(b, k) => {
                let db = b.derive_with(sym_derivative);
                if db.is_zero_const() {
                    return Expr::zero();
                }
                prod_of(vec![
                    Expr::int(*k as i64),
                    (**b).clone().pow_i(*k - 1),
                    db,
                ])
            }
        }
    }

    /// Rewrites the expression as a formal fraction `(numerator, denominator)`
    /// with both parts quotient-free. Denominators are syntactically nonzero
    /// by construction of the inputs.
    pub fn as_fraction(&self) -> (Expr, Expr) {
        match self {
            Expr::Const(_) | Expr::Sym(_) => (self.clone(), Expr::one()),
            Expr::Neg(x) => {
                let (n, d) = x.as_fraction();
                (Expr::Neg(Box::new(n)), d)
            }
            Expr::Sum(xs) => {
                let mut num = Expr::zero();
                let mut den = Expr::one();
                for x in xs {
                    let (nx, dx) = x.as_fraction();
                    if dx.is_one_const() {
                        num = if num.is_zero_const() {
                            prod_of(vec![nx, den.clone()]).simplify()
                        } else {
                            num + prod_of(vec![nx, den.clone()]).simplify()
                        };
                        continue;
                    }
                    // num/den + nx/dx = (num*dx + nx*den) / (den*dx)
                    let new_num = sum_of(vec![
                        prod_of(vec![num.clone(), dx.clone()]),
                        prod_of(vec![nx, den.clone()]),
                    ])
                    .simplify();
                    den = prod_of(vec![den, dx]).simplify();
                    num = new_num;
                }
                (num.simplify(), den)
            }
            Expr::Prod(xs) => {
                let mut nums = Vec::new();
                let mut dens = Vec::new();
                for x in xs {
                    let (n, d) = x.as_fraction();
                    nums.push(n);
                    if !d.is_one_const() {
                        dens.push(d);
                    }
                }
                (prod_of(nums).simplify(), prod_of(dens).simplify())
            }
            Expr::Div(a, b) => {
                let (na, da) = a.as_fraction();
                let (nb, db) = b.as_fraction();
                (
                    prod_of(vec![na, db]).simplify(),
                    prod_of(vec![da, nb]).simplify(),
                )
            }
            Expr::Pow(b, k) => {
                let (n, d) = b.as_fraction();
                if *k >= 0 {
                    (
                        n.pow_i(*k).simplify(),
                        if d.is_one_const() {
                            Expr::one()
                        } else {
                            d.pow_i(*k).simplify()
                        },
                    )
                } else {
                    (d.pow_i(-*k).simplify(), n.pow_i(-*k).simplify())
                }
            }
        }
    }

    /// Replaces symbols by expressions.
    pub fn substitute(&self, map: &HashMap<Symbol, Expr>) -> Expr {
        match self {
            Expr::Const(_) => self.clone(),
            Expr::Sym(s) => map.get(s).cloned().unwrap_or_else(|| self.clone()),
            Expr::Sum(xs) => Expr::Sum(xs.iter().map(|x| x.substitute(map)).collect()),
            Expr::Prod(xs) => Expr::Prod(xs.iter().map(|x| x.substitute(map)).collect()),
            Expr::Neg(x) => Expr::Neg(Box::new(x.substitute(map))),
            Expr::Div(n, d) => {
                Expr::Div(Box::new(n.substitute(map)), Box::new(d.substitute(map)))
            }
            Expr::Pow(b, k) => Expr::Pow(Box::new(b.substitute(map)), *k),
        }
    }

    /// Value-preserving cleanup: constant folding, 0/1 absorption, flattening
    /// of nested sums and products, and like-term collection. Not canonical.
    pub fn simplify(&self) -> Expr {
        match self {
            Expr::Const(_) | Expr::Sym(_) => self.clone(),
            Expr::Neg(x) => match x.simplify() {
                Expr::Const(c) => Expr::Const(c.neg()),
                Expr::Neg(inner) => *inner,
                other => Expr::Neg(Box::new(other)),
            },
            Expr::Sum(xs) => simplify_sum(xs),
            Expr::Prod(xs) => simplify_prod(xs),
            Expr::Div(n, d) => {
                let n = n.simplify();
                let d = d.simplify();
                if n.is_zero_const() && !d.is_zero_const() {
                    return Expr::zero();
                }
                if d.is_one_const() {
                    return n;
                }
                if let (Expr::Const(a), Expr::Const(b)) = (&n, &d) {
                    if let Some(q) = a.div(b) {
                        return Expr::Const(q);
                    }
                }
                Expr::Div(Box::new(n), Box::new(d))
            }
            Expr::Pow(b, k) => {
                let b = b.simplify();
                match *k {
                    0 => Expr::one(),
                    1 => b,
                    k => {
                        if let Expr::Const(c) = &b {
                            if let Some(p) = c.powi(k) {
                                return Expr::Const(p);
                            }
                        }
                        if let Expr::Pow(inner, j) = b {
                            return inner.pow_i(j.saturating_mul(k));
                        }
                        Expr::Pow(Box::new(b), k)
                    }
                }
            }
        }
    }
}

/// Builds a sum, collapsing empty and singleton cases.
pub fn sum_of(parts: Vec<Expr>) -> Expr {
    match parts.len() {
        0 => Expr::zero(),
        1 => parts.into_iter().next().unwrap(),
        _ => Expr::Sum(parts),
    }
}

/// Builds a product, collapsing empty and singleton cases.
pub fn prod_of(factors: Vec<Expr>) -> Expr {
    match factors.len() {
        0 => Expr::one(),
        1 => factors.into_iter().next().unwrap(),
        _ => Expr::Prod(factors),
    }
}

fn simplify_sum(xs: &[Expr]) -> Expr {
    // Flatten nested sums, fold constants, then merge structurally equal
    // terms by accumulating their numeric coefficients.
    let mut flat = Vec::new();
    for x in xs {
        match x.simplify() {
            Expr::Sum(inner) => flat.extend(inner),
            other => flat.push(other),
        }
    }

    let mut constant = Number::from_int(0);
    let mut terms: Vec<(Expr, Number)> = Vec::new();
    for t in flat {
        let (coef, core) = split_coefficient(t);
        if coef.is_zero() {
            continue;
        }
        if core.is_one_const() {
            constant = constant.add(&coef);
            continue;
        }
        if let Some(entry) = terms.iter_mut().find(|(c, _)| *c == core) {
            entry.1 = entry.1.add(&coef);
        } else {
            terms.push((core, coef));
        }
    }

    let mut parts = Vec::new();
    for (core, coef) in terms {
        if coef.is_zero() {
            continue;
        }
        parts.push(apply_coefficient(coef, core));
    }
    if !constant.is_zero() {
        parts.push(Expr::Const(constant));
    }
    sum_of(parts)
}

fn simplify_prod(xs: &[Expr]) -> Expr {
    let mut flat = Vec::new();
    let mut coef = Number::from_int(1);
    let mut negate = false;
    let mut stack: Vec<Expr> = xs.iter().map(|x| x.simplify()).collect();
    stack.reverse();
    while let Some(x) = stack.pop() {
        match x {
            Expr::Prod(inner) => {
                for e in inner.into_iter().rev() {
                    stack.push(e);
                }
            }
            Expr::Neg(inner) => {
                negate = !negate;
                stack.push(*inner);
            }
            Expr::Const(c) => coef = coef.mul(&c),
            other => flat.push(other),
        }
    }
    if coef.is_zero() {
        return Expr::zero();
    }

    // Merge repeated factors into integer powers.
    let mut bases: Vec<(Expr, i32)> = Vec::new();
    for f in flat {
        let (base, k) = match f {
            Expr::Pow(b, k) => (*b, k),
            other => (other, 1),
        };
        if let Some(entry) = bases.iter_mut().find(|(b, _)| *b == base) {
            entry.1 += k;
        } else {
            bases.push((base, k));
        }
    }

    let mut factors = Vec::new();
    if !coef.is_one() {
        factors.push(Expr::Const(coef));
    }
    for (base, k) in bases {
        if k == 0 {
            continue;
        }
        factors.push(base.pow_i(k));
    }
    let core = prod_of(factors);
    if negate {
        match core {
            Expr::Const(c) => Expr::Const(c.neg()),
            other => Expr::Neg(Box::new(other)),
        }
    } else {
        core
    }
}

/// Splits a term into (numeric coefficient, residual factor).
fn split_coefficient(e: Expr) -> (Number, Expr) {
    match e {
        Expr::Const(c) => (c, Expr::one()),
        Expr::Neg(inner) => {
            let (c, core) = split_coefficient(*inner);
            (c.neg(), core)
        }
        Expr::Prod(xs) => {
            let mut coef = Number::from_int(1);
            let mut rest = Vec::new();
            for x in xs {
                match x {
                    Expr::Const(c) => coef = coef.mul(&c),
                    Expr::Neg(inner) => {
                        coef = coef.neg();
                        rest.push(*inner);
                    }
                    other => rest.push(other),
                }
            }
            (coef, prod_of(rest))
        }
        other => (Number::from_int(1), other),
    }
}

fn apply_coefficient(coef: Number, core: Expr) -> Expr {
    if coef.is_one() {
        return core;
    }
    if coef == Number::from_int(-1) {
        return Expr::Neg(Box::new(core));
    }
    let negative = match &coef {
        Number::Rational(r) => r.is_negative(),
        Number::Real(x) => *x < 0.0,
    };
    if negative {
        Expr::Neg(Box::new(prod_of(vec![Expr::Const(coef.neg()), core])))
    } else {
        prod_of(vec![Expr::Const(coef), core])
    }
}

// ---------------------------------------------------------------------------
// Display

#[derive(PartialEq, PartialOrd)]
enum Prec {
    Sum,
    Prod,
    Unary,
    Pow,
    Atom,
}

fn precedence(e: &Expr) -> Prec {
    match e {
        Expr::Sum(_) => Prec::Sum,
        Expr::Prod(_) | Expr::Div(..) => Prec::Prod,
        Expr::Neg(_) => Prec::Unary,
        Expr::Pow(..) => Prec::Pow,
        Expr::Const(Number::Rational(r)) if !r.denom().is_one() => Prec::Prod,
        Expr::Const(Number::Rational(r)) if r.is_negative() => Prec::Unary,
        Expr::Const(Number::Real(x)) if *x < 0.0 => Prec::Unary,
        Expr::Const(_) | Expr::Sym(_) => Prec::Atom,
    }
}

fn fmt_child(f: &mut fmt::Formatter<'_>, e: &Expr, min: Prec) -> fmt::Result {
    if precedence(e) < min {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Sym(s) => write!(f, "{s}"),
            Expr::Sum(xs) => {
                for (i, x) in xs.iter().enumerate() {
                    if i == 0 {
                        fmt_child(f, x, Prec::Sum)?;
                        continue;
                    }
                    match x {
                        Expr::Neg(inner) => {
                            write!(f, " - ")?;
                            fmt_child(f, inner, Prec::Prod)?;
                        }
                        Expr::Const(c)
                            if matches!(c, Number::Rational(r) if r.is_negative())
                                || matches!(c, Number::Real(v) if *v < 0.0) =>
                        {
                            write!(f, " - {}", Expr::Const(c.neg()))?;
                        }
                        _ => {
                            write!(f, " + ")?;
                            fmt_child(f, x, Prec::Prod)?;
                        }
                    }
                }
                Ok(())
            }
            Expr::Prod(xs) => {
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        write!(f, "*")?;
                    }
                    fmt_child(f, x, Prec::Unary)?;
                }
                Ok(())
            }
            Expr::Neg(x) => {
                write!(f, "-")?;
                fmt_child(f, x, Prec::Unary)
            }
            Expr::Div(n, d) => {
                fmt_child(f, n, Prec::Prod)?;
                write!(f, "/")?;
                fmt_child(f, d, Prec::Pow)
            }
            Expr::Pow(b, k) => {
                fmt_child(f, b, Prec::Atom)?;
                write!(f, "^{k}")
            }
        }
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

// ---------------------------------------------------------------------------
// Operator overloads for readable construction in code and tests.

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::Sum(vec![self, rhs])
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::Sum(vec![self, Expr::Neg(Box::new(rhs))])
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::Prod(vec![self, rhs])
    }
}

impl std::ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::Div(Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Neg(Box::new(self))
    }
}

// ---------------------------------------------------------------------------
// Compiled form for tight evaluation loops (ODE right-hand sides).

#[derive(Clone, Debug)]
enum OpCode {
    Const(f64),
    Load(usize),
    Add,
    Mul,
    Neg,
    Div,
    Pow(i32),
}

/// An expression lowered to a stack program against a fixed slot layout.
#[derive(Clone, Debug)]
pub struct CompiledExpr {
    ops: Vec<OpCode>,
}

impl CompiledExpr {
    /// Compiles against `slots`; every symbol in the expression must appear.
    pub fn compile(e: &Expr, slots: &HashMap<Symbol, usize>) -> Result<Self, EvalError> {
        let mut ops = Vec::new();
        lower(e, slots, &mut ops)?;
        Ok(CompiledExpr { ops })
    }

    /// Evaluates against slot values. Returns `None` on an exact-zero divisor.
    pub fn eval(&self, values: &[f64], stack: &mut Vec<f64>) -> Option<f64> {
        stack.clear();
        for op in &self.ops {
            match op {
                OpCode::Const(c) => stack.push(*c),
                OpCode::Load(i) => stack.push(values[*i]),
                OpCode::Add => {
                    let b = stack.pop()?;
                    let a = stack.last_mut()?;
                    *a += b;
                }
                OpCode::Mul => {
                    let b = stack.pop()?;
                    let a = stack.last_mut()?;
                    *a *= b;
                }
                OpCode::Neg => {
                    let a = stack.last_mut()?;
                    *a = -*a;
                }
                OpCode::Div => {
                    let b = stack.pop()?;
                    if b == 0.0 {
                        return None;
                    }
                    let a = stack.last_mut()?;
                    *a /= b;
                }
                OpCode::Pow(k) => {
                    let a = stack.last_mut()?;
                    if *k < 0 && *a == 0.0 {
                        return None;
                    }
                    *a = a.powi(*k);
                }
            }
        }
        stack.pop()
    }
}

fn lower(e: &Expr, slots: &HashMap<Symbol, usize>, ops: &mut Vec<OpCode>) -> Result<(), EvalError> {
    match e {
        Expr::Const(c) => ops.push(OpCode::Const(c.to_f64())),
        Expr::Sym(s) => {
            let slot = slots
                .get(s)
                .ok_or_else(|| EvalError::Unbound(s.as_str().to_owned()))?;
            ops.push(OpCode::Load(*slot));
        }
        Expr::Sum(xs) => {
            if xs.is_empty() {
                ops.push(OpCode::Const(0.0));
            } else {
                for (i, x) in xs.iter().enumerate() {
                    lower(x, slots, ops)?;
                    if i > 0 {
                        ops.push(OpCode::Add);
                    }
                }
            }
        }
        Expr::Prod(xs) => {
            if xs.is_empty() {
                ops.push(OpCode::Const(1.0));
            } else {
                for (i, x) in xs.iter().enumerate() {
                    lower(x, slots, ops)?;
                    if i > 0 {
                        ops.push(OpCode::Mul);
                    }
                }
            }
        }
        Expr::Neg(x) => {
            lower(x, slots, ops)?;
            ops.push(OpCode::Neg);
        }
        Expr::Div(n, d) => {
            lower(n, slots, ops)?;
            lower(d, slots, ops)?;
            ops.push(OpCode::Div);
        }
        Expr::Pow(b, k) => {
            lower(b, slots, ops)?;
            ops.push(OpCode::Pow(*k));
        }
    }
    Ok(())
}

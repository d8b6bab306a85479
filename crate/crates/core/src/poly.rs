//! Sparse multivariate polynomials over complex coefficients, expansion of
//! rational expressions into cleared polynomial equations, and the affine
//! presolve used before homotopy solving.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

use crate::expr::{Expr, Symbol};
use crate::jet::{JetVar, ProlongedSystem};
use crate::model::OdeModel;

pub type C64 = Complex64;

#[derive(Debug, Error)]
pub enum ExpandError {
    #[error("symbol `{0}` is neither an unknown nor numerically bound")]
    UnknownSymbol(String),
    #[error("missing derivative estimate for output `{output}` at order {order}")]
    MissingEstimate { output: String, order: u32 },
    #[error("missing input derivative value for `{0}`")]
    MissingInput(String),
}

/// What an unknown of an estimation system stands for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VarRole {
    Parameter(Symbol),
    Jet(JetVar),
}

/// Provenance of an equation, used for ordering and diagnostics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EquationKind {
    OutputDerivative { output: Symbol, order: u32 },
    JetConstraint(JetVar),
    Plain,
}

/// A sparse polynomial: exponent vectors over a shared variable list.
#[derive(Clone)]
pub struct MultiPoly {
    vars: Arc<Vec<Symbol>>,
    terms: HashMap<Vec<u16>, C64>,
}

impl MultiPoly {
    pub fn zero(vars: Arc<Vec<Symbol>>) -> Self {
        MultiPoly {
            vars,
            terms: HashMap::new(),
        }
    }

    pub fn constant(vars: Arc<Vec<Symbol>>, c: C64) -> Self {
        let mut p = MultiPoly::zero(vars);
        if c != C64::new(0.0, 0.0) {
            p.terms.insert(vec![0; p.vars.len()], c);
        }
        p
    }

    pub fn variable(vars: Arc<Vec<Symbol>>, index: usize) -> Self {
        let mut exps = vec![0u16; vars.len()];
        exps[index] = 1;
        let mut p = MultiPoly::zero(vars);
        p.terms.insert(exps, C64::new(1.0, 0.0));
        p
    }

    pub fn vars(&self) -> &Arc<Vec<Symbol>> {
        &self.vars
    }

    pub fn nvars(&self) -> usize {
        self.vars.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u16], C64)> {
        self.terms.iter().map(|(e, c)| (e.as_slice(), *c))
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Constant value when the polynomial has no variable dependence.
    pub fn as_constant(&self) -> Option<C64> {
        match self.terms.len() {
            0 => Some(C64::new(0.0, 0.0)),
            1 => {
                let (e, c) = self.terms.iter().next().unwrap();
                if e.iter().all(|&k| k == 0) {
                    Some(*c)
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    pub fn is_one(&self) -> bool {
        self.as_constant()
            .map(|c| c == C64::new(1.0, 0.0))
            .unwrap_or(false)
    }

    pub fn total_degree(&self) -> usize {
        self.terms
            .keys()
            .map(|e| e.iter().map(|&k| k as usize).sum())
            .max()
            .unwrap_or(0)
    }

    pub fn degree_in(&self, var: usize) -> u16 {
        self.terms.keys().map(|e| e[var]).max().unwrap_or(0)
    }

    /// Active variables (nonzero exponent somewhere).
    pub fn support(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for e in self.terms.keys() {
            for (i, &k) in e.iter().enumerate() {
                if k > 0 {
                    out.insert(i);
                }
            }
        }
        out
    }

    pub fn coefficient_norm(&self) -> f64 {
        self.terms.values().map(|c| c.norm()).sum()
    }

    fn insert_term(&mut self, exps: Vec<u16>, c: C64) {
        if c == C64::new(0.0, 0.0) {
            return;
        }
        use std::collections::hash_map::Entry;
        match self.terms.entry(exps) {
            Entry::Occupied(mut o) => {
                let v = *o.get() + c;
                if v == C64::new(0.0, 0.0) {
                    o.remove();
                } else {
                    *o.get_mut() = v;
                }
            }
            Entry::Vacant(v) => {
                v.insert(c);
            }
        }
    }

    pub fn add(&self, other: &MultiPoly) -> MultiPoly {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.insert_term(e.clone(), *c);
        }
        out
    }

    pub fn sub(&self, other: &MultiPoly) -> MultiPoly {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.insert_term(e.clone(), -*c);
        }
        out
    }

    pub fn neg(&self) -> MultiPoly {
        MultiPoly {
            vars: self.vars.clone(),
            terms: self.terms.iter().map(|(e, c)| (e.clone(), -*c)).collect(),
        }
    }

    pub fn scale(&self, c: C64) -> MultiPoly {
        if c == C64::new(0.0, 0.0) {
            return MultiPoly::zero(self.vars.clone());
        }
        MultiPoly {
            vars: self.vars.clone(),
            terms: self.terms.iter().map(|(e, k)| (e.clone(), c * k)).collect(),
        }
    }

    pub fn mul(&self, other: &MultiPoly) -> MultiPoly {
        let mut out = MultiPoly::zero(self.vars.clone());
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let exps: Vec<u16> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.insert_term(exps, ca * cb);
            }
        }
        out
    }

    pub fn powu(&self, k: usize) -> MultiPoly {
        let mut out = MultiPoly::constant(self.vars.clone(), C64::new(1.0, 0.0));
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    /// Partial derivative with respect to variable `var`.
    pub fn derivative(&self, var: usize) -> MultiPoly {
        let mut out = MultiPoly::zero(self.vars.clone());
        for (e, c) in &self.terms {
            let k = e[var];
            if k == 0 {
                continue;
            }
            let mut exps = e.clone();
            exps[var] = k - 1;
            out.insert_term(exps, c * C64::new(k as f64, 0.0));
        }
        out
    }

    pub fn eval(&self, point: &[C64]) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for (e, c) in &self.terms {
            let mut term = *c;
            for (i, &k) in e.iter().enumerate() {
                if k > 0 {
                    term *= point[i].powu(k as u32);
                }
            }
            acc += term;
        }
        acc
    }

    /// Sum of absolute values of evaluated terms: the natural scale for
    /// judging whether `eval` is a numerical zero at this point.
    pub fn eval_magnitude(&self, point: &[C64]) -> f64 {
        let mut acc = 0.0;
        for (e, c) in &self.terms {
            let mut term = c.norm();
            for (i, &k) in e.iter().enumerate() {
                if k > 0 {
                    term *= point[i].norm().powi(k as i32);
                }
            }
            acc += term;
        }
        acc
    }

    /// Substitutes variable `var` by the numeric value `value`.
    pub fn substitute_value(&self, var: usize, value: C64) -> MultiPoly {
        let mut out = MultiPoly::zero(self.vars.clone());
        for (e, c) in &self.terms {
            let k = e[var];
            let mut exps = e.clone();
            exps[var] = 0;
            let coef = if k > 0 { c * value.powu(k as u32) } else { *c };
            out.insert_term(exps, coef);
        }
        out
    }

    /// Substitutes variable `var` by an affine form
    /// `constant + sum coeffs[i] * v_i` given as a polynomial.
    pub fn substitute_affine(&self, var: usize, affine: &MultiPoly) -> MultiPoly {
        let max_pow = self.degree_in(var) as usize;
        if max_pow == 0 {
            return self.clone();
        }
        let mut powers: Vec<MultiPoly> =
            vec![MultiPoly::constant(self.vars.clone(), C64::new(1.0, 0.0))];
        for k in 1..=max_pow {
            powers.push(powers[k - 1].mul(affine));
        }
        let mut out = MultiPoly::zero(self.vars.clone());
        for (e, c) in &self.terms {
            let k = e[var] as usize;
            let mut exps = e.clone();
            exps[var] = 0;
            let mut base = MultiPoly::zero(self.vars.clone());
            base.insert_term(exps, *c);
            out = out.add(&base.mul(&powers[k]));
        }
        out
    }

    /// Drops coefficients below `rel_tol` times the largest coefficient;
    /// used after substitutions to keep cancellation dust from inflating
    /// degrees.
    pub fn prune(&self, rel_tol: f64) -> MultiPoly {
        let max = self.terms.values().map(|c| c.norm()).fold(0.0f64, f64::max);
        if max == 0.0 {
            return MultiPoly::zero(self.vars.clone());
        }
        let cut = rel_tol * max;
        MultiPoly {
            vars: self.vars.clone(),
            terms: self
                .terms
                .iter()
                .filter(|(_, c)| c.norm() > cut)
                .map(|(e, c)| (e.clone(), *c))
                .collect(),
        }
    }

    /// `(constant, [(var, coeff)])` when total degree <= 1.
    pub fn as_affine(&self) -> Option<(C64, Vec<(usize, C64)>)> {
        let mut constant = C64::new(0.0, 0.0);
        let mut linear = Vec::new();
        for (e, c) in &self.terms {
            let deg: usize = e.iter().map(|&k| k as usize).sum();
            match deg {
                0 => constant = *c,
                1 => {
                    let var = e.iter().position(|&k| k == 1).unwrap();
                    linear.push((var, *c));
                }
                _ => return None,
            }
        }
        linear.sort_by_key(|(v, _)| *v);
        Some((constant, linear))
    }
}

impl fmt::Debug for MultiPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut terms: Vec<_> = self.terms.iter().collect();
        terms.sort_by(|a, b| b.0.cmp(a.0));
        if terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (e, c)) in terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "({:.6e}{:+.6e}i)", c.re, c.im)?;
            for (v, &k) in e.iter().enumerate() {
                if k > 0 {
                    write!(f, "*{}^{}", self.vars[v], k)?;
                }
            }
        }
        Ok(())
    }
}

/// A system of polynomial equations over one shared variable list, plus the
/// side conditions (cleared denominators that must stay nonzero).
#[derive(Clone, Debug)]
pub struct PolynomialSystem {
    pub vars: Arc<Vec<Symbol>>,
    pub roles: Vec<VarRole>,
    pub polys: Vec<MultiPoly>,
    pub kinds: Vec<EquationKind>,
    pub side_conditions: Vec<MultiPoly>,
}

impl PolynomialSystem {
    pub fn nvars(&self) -> usize {
        self.vars.len()
    }

    pub fn from_polys(vars: Arc<Vec<Symbol>>, polys: Vec<MultiPoly>) -> Self {
        let roles = vars
            .iter()
            .map(|s| VarRole::Parameter(s.clone()))
            .collect();
        let kinds = vec![EquationKind::Plain; polys.len()];
        PolynomialSystem {
            vars,
            roles,
            polys,
            kinds,
            side_conditions: Vec::new(),
        }
    }

    /// Worst relative residual over all equations at a point: each residual
    /// is scaled by the term-magnitude sum of its equation, so a value near
    /// machine epsilon means "numerically satisfied".
    pub fn relative_residual(&self, point: &[C64]) -> f64 {
        let mut worst = 0.0f64;
        for p in &self.polys {
            let scale = 1.0 + p.eval_magnitude(point);
            worst = worst.max(p.eval(point).norm() / scale);
        }
        worst
    }

    /// True when every side condition is bounded away from zero at `point`.
    pub fn side_conditions_hold(&self, point: &[C64], rel_tol: f64) -> bool {
        self.side_conditions.iter().all(|d| {
            let scale = 1.0 + d.eval_magnitude(point);
            d.eval(point).norm() >= rel_tol * scale
        })
    }
}

/// Expands an expression into a cleared fraction `(numerator, denominator)`
/// of multivariate polynomials. Symbols must either be unknowns (present in
/// `index`) or numerically bound.
pub fn expand_fraction(
    e: &Expr,
    vars: &Arc<Vec<Symbol>>,
    index: &HashMap<Symbol, usize>,
    bindings: &HashMap<Symbol, C64>,
) -> Result<(MultiPoly, MultiPoly), ExpandError> {
    let one = || MultiPoly::constant(vars.clone(), C64::new(1.0, 0.0));
    match e {
        Expr::Const(c) => Ok((
            MultiPoly::constant(vars.clone(), C64::new(c.to_f64(), 0.0)),
            one(),
        )),
        Expr::Sym(s) => {
            if let Some(&i) = index.get(s) {
                Ok((MultiPoly::variable(vars.clone(), i), one()))
            } else if let Some(v) = bindings.get(s) {
                Ok((MultiPoly::constant(vars.clone(), *v), one()))
            } else {
                Err(ExpandError::UnknownSymbol(s.as_str().to_owned()))
            }
        }
        Expr::Sum(xs) => {
            let mut num = MultiPoly::zero(vars.clone());
            let mut den = one();
            for x in xs {
                let (nx, dx) = expand_fraction(x, vars, index, bindings)?;
                if dx.is_one() {
                    num = num.add(&nx.mul(&den));
                } else {
                    num = num.mul(&dx).add(&nx.mul(&den));
                    den = den.mul(&dx);
                }
            }
            Ok((num, den))
        }
        Expr::Prod(xs) => {
            let mut num = one();
            let mut den = one();
            for x in xs {
                let (nx, dx) = expand_fraction(x, vars, index, bindings)?;
                num = num.mul(&nx);
                if !dx.is_one() {
                    den = den.mul(&dx);
                }
            }
            Ok((num, den))
        }
        Expr::Neg(x) => {
            let (n, d) = expand_fraction(x, vars, index, bindings)?;
            Ok((n.neg(), d))
        }
        Expr::Div(a, b) => {
            let (na, da) = expand_fraction(a, vars, index, bindings)?;
            let (nb, db) = expand_fraction(b, vars, index, bindings)?;
            Ok((na.mul(&db), da.mul(&nb)))
        }
        Expr::Pow(b, k) => {
            let (n, d) = expand_fraction(b, vars, index, bindings)?;
            if *k >= 0 {
                Ok((n.powu(*k as usize), d.powu(*k as usize)))
            } else {
                Ok((d.powu(-*k as usize), n.powu(-*k as usize)))
            }
        }
    }
}

/// Builds the numeric overdetermined polynomial system from a prolonged
/// system and derivative estimates.
///
/// Each output equation `estimate ~ rhs` becomes `estimate*den - num`; each
/// jet constraint residual is expanded directly (constraints are already in
/// cleared form). Every cleared denominator is recorded as a side condition.
/// Equations are ordered by ascending total degree with jet constraints
/// before output equations at equal degree, which is the order the squaring
/// step consumes them in.
pub fn build_estimation_system(
    ps: &ProlongedSystem,
    model: &OdeModel,
    jet_estimates: &BTreeMap<(Symbol, u32), f64>,
    input_jets: &BTreeMap<Symbol, Vec<f64>>,
    t_star: f64,
) -> Result<PolynomialSystem, ExpandError> {
    // Unknowns: parameters in declaration order, then jets grouped by state
    // declaration order and ascending derivative order.
    let jets = ps.jet_variables();
    let mut ordered_jets: Vec<JetVar> = Vec::new();
    for s in model.states() {
        let mut of_state: Vec<JetVar> =
            jets.iter().filter(|j| &j.base == s).cloned().collect();
        of_state.sort_by_key(|j| j.order);
        ordered_jets.extend(of_state);
    }

    let mut var_syms: Vec<Symbol> = Vec::new();
    let mut roles: Vec<VarRole> = Vec::new();
    for p in model.parameters() {
        var_syms.push(p.clone());
        roles.push(VarRole::Parameter(p.clone()));
    }
    for j in &ordered_jets {
        var_syms.push(j.symbol());
        roles.push(VarRole::Jet(j.clone()));
    }
    let vars = Arc::new(var_syms);
    let index: HashMap<Symbol, usize> = vars
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();

    // Numeric bindings: the evaluation time and any input derivatives.
    let mut bindings: HashMap<Symbol, C64> = HashMap::new();
    bindings.insert(model.time().clone(), C64::new(t_star, 0.0));
    for u in model.inputs() {
        let derivs = input_jets
            .get(u)
            .ok_or_else(|| ExpandError::MissingInput(u.as_str().to_owned()))?;
        let max_order = jets
            .iter()
            .filter(|j| &j.base == u)
            .map(|j| j.order)
            .max()
            .unwrap_or(0);
        for k in 0..=max_order {
            let v = derivs.get(k as usize).copied().unwrap_or(0.0);
            bindings.insert(JetVar::new(u.clone(), k).symbol(), C64::new(v, 0.0));
        }
    }

    let mut equations: Vec<(MultiPoly, EquationKind)> = Vec::new();
    let mut side_conditions: Vec<MultiPoly> = Vec::new();

    for c in &ps.jet_constraints {
        let (num, den) = expand_fraction(&c.residual, &vars, &index, &bindings)?;
        if !den.is_one() {
            side_conditions.push(den);
        }
        equations.push((num, EquationKind::JetConstraint(c.defines.clone())));
    }

    for ((output, order), rhs) in &ps.output_equations {
        let est = jet_estimates.get(&(output.clone(), *order)).ok_or_else(|| {
            ExpandError::MissingEstimate {
                output: output.as_str().to_owned(),
                order: *order,
            }
        })?;
        let (num, den) = expand_fraction(rhs, &vars, &index, &bindings)?;
        let poly = num.sub(&den.scale(C64::new(*est, 0.0)));
        if !den.is_one() {
            side_conditions.push(den);
        }
        equations.push((
            poly,
            EquationKind::OutputDerivative {
                output: output.clone(),
                order: *order,
            },
        ));
    }

    for d in &ps.cleared_denominators {
        let (num, den) = expand_fraction(d, &vars, &index, &bindings)?;
        debug_assert!(den.is_one(), "cleared denominators are polynomial");
        side_conditions.push(num);
    }

    // Deduplicate side conditions structurally (same support and degree and
    // matching evaluation at a probe point).
    let probe: Vec<C64> = (0..vars.len())
        .map(|i| C64::new(0.37 + 0.11 * i as f64, 0.21 - 0.05 * i as f64))
        .collect();
    let mut kept: Vec<MultiPoly> = Vec::new();
    for d in side_conditions {
        if d.as_constant().is_some() {
            continue;
        }
        let val = d.eval(&probe);
        let duplicate = kept.iter().any(|k| {
            k.term_count() == d.term_count()
                && k.total_degree() == d.total_degree()
                && (k.eval(&probe) - val).norm() <= 1e-12 * (1.0 + val.norm())
        });
        if !duplicate {
            kept.push(d);
        }
    }

    // Squaring consumes equations in this order: constraints first within a
    // degree class, lower degree first overall.
    equations.sort_by_key(|(p, kind)| {
        let kind_rank = match kind {
            EquationKind::JetConstraint(_) => 0usize,
            EquationKind::OutputDerivative { .. } => 1,
            EquationKind::Plain => 2,
        };
        (p.total_degree(), kind_rank)
    });

    let (polys, kinds): (Vec<MultiPoly>, Vec<EquationKind>) = equations.into_iter().unzip();
    Ok(PolynomialSystem {
        vars,
        roles,
        polys,
        kinds,
        side_conditions: kept,
    })
}

/// One recorded elimination: `var = constant + sum coeffs[i] * v_i`.
#[derive(Clone, Debug)]
pub struct AffineSubstitution {
    pub var: usize,
    pub constant: C64,
    pub coeffs: Vec<(usize, C64)>,
}

/// Result of the affine presolve: remaining equations over the still-active
/// variables, the substitution chain, and near-zero consistency leftovers.
#[derive(Clone, Debug)]
pub struct ReducedSystem {
    pub polys: Vec<MultiPoly>,
    pub active: BTreeSet<usize>,
    pub substitutions: Vec<AffineSubstitution>,
    /// Residual magnitudes of equations that became constant.
    pub consistency: Vec<f64>,
}

const PRUNE_REL_TOL: f64 = 1e-12;

/// Gaussian elimination of affine equations with numeric pivots. Equations
/// that reduce to constants are dropped into `consistency`; with noisy
/// derivative estimates these are redundant equations and carry residuals of
/// the order of the estimate error.
pub fn eliminate_affine(polys: &[MultiPoly], nvars: usize) -> ReducedSystem {
    let mut work: Vec<MultiPoly> = polys.to_vec();
    let mut active: BTreeSet<usize> = (0..nvars).collect();
    let mut substitutions = Vec::new();
    let mut consistency = Vec::new();

    loop {
        let mut chosen: Option<(usize, usize, C64, Vec<(usize, C64)>, C64)> = None;
        'search: for (ei, p) in work.iter().enumerate() {
            if p.total_degree() > 1 {
                continue;
            }
            let Some((constant, linear)) = p.as_affine() else {
                continue;
            };
            if linear.is_empty() {
                continue;
            }
            let scale = constant.norm()
                + linear.iter().map(|(_, c)| c.norm()).sum::<f64>();
            // Largest usable pivot.
            let mut best: Option<(usize, C64)> = None;
            for (v, c) in &linear {
                if !active.contains(v) {
                    continue;
                }
                if c.norm() >= 1e-9 * scale {
                    if best.map(|(_, b)| c.norm() > b.norm()).unwrap_or(true) {
                        best = Some((*v, *c));
                    }
                }
            }
            if let Some((pivot, pcoef)) = best {
                chosen = Some((ei, pivot, pcoef, linear, constant));
                break 'search;
            }
        }

        let Some((ei, pivot, pcoef, linear, constant)) = chosen else {
            break;
        };

        // pivot = -(constant + sum_{v != pivot} c_v v) / pcoef
        let coeffs: Vec<(usize, C64)> = linear
            .iter()
            .filter(|(v, _)| *v != pivot)
            .map(|(v, c)| (*v, -c / pcoef))
            .collect();
        let sub_const = -constant / pcoef;

        work.remove(ei);
        active.remove(&pivot);

        let vars = polys[0].vars().clone();
        let mut affine = MultiPoly::constant(vars.clone(), sub_const);
        for (v, c) in &coeffs {
            affine = affine.add(&MultiPoly::variable(vars.clone(), *v).scale(*c));
        }

        let mut next_work = Vec::with_capacity(work.len());
        for p in &work {
            let q = p.substitute_affine(pivot, &affine).prune(PRUNE_REL_TOL);
            if let Some(c) = q.as_constant() {
                consistency.push(c.norm());
            } else {
                next_work.push(q);
            }
        }
        work = next_work;

        substitutions.push(AffineSubstitution {
            var: pivot,
            constant: sub_const,
            coeffs,
        });
    }

    ReducedSystem {
        polys: work,
        active,
        substitutions,
        consistency,
    }
}

/// Recovers eliminated variables for a solution of the reduced system.
/// `values` must hold the active variables; eliminated entries are filled.
pub fn back_substitute(subs: &[AffineSubstitution], values: &mut [Option<C64>]) {
    for sub in subs.iter().rev() {
        let mut v = sub.constant;
        for (var, c) in &sub.coeffs {
            let Some(x) = values[*var] else {
                // Unconstrained variable; treated as zero contribution is
                // wrong, so leave the chain value undefined.
                values[sub.var] = None;
                return;
            };
            v += c * x;
        }
        values[sub.var] = Some(v);
    }
}

/// Finds a minimal closed block: a set of equations whose combined variable
/// support is no larger than the equation count, so it can be squared and
/// solved on its own. Returns equation indices and the block's variables.
/// Falls back to the whole system.
pub fn find_block(polys: &[MultiPoly], active: &BTreeSet<usize>) -> (Vec<usize>, BTreeSet<usize>) {
    let supports: Vec<BTreeSet<usize>> = polys
        .iter()
        .map(|p| p.support().intersection(active).copied().collect())
        .collect();

    let mut best: Option<(Vec<usize>, BTreeSet<usize>)> = None;
    for seed in 0..polys.len() {
        if supports[seed].is_empty() {
            continue;
        }
        let mut vars: BTreeSet<usize> = supports[seed].clone();
        loop {
            let members: Vec<usize> = (0..polys.len())
                .filter(|&e| !supports[e].is_empty() && supports[e].is_subset(&vars))
                .collect();
            if members.len() >= vars.len() {
                let better = best
                    .as_ref()
                    .map(|(_, bv)| vars.len() < bv.len())
                    .unwrap_or(true);
                if better {
                    best = Some((members, vars.clone()));
                }
                break;
            }
            // Grow by the equation that adds the fewest new variables.
            let grow = (0..polys.len())
                .filter(|&e| !supports[e].is_empty() && !supports[e].is_subset(&vars))
                .min_by_key(|&e| supports[e].difference(&vars).count());
            match grow {
                Some(e) => {
                    vars.extend(supports[e].iter().copied());
                }
                None => break,
            }
        }
    }

    best.unwrap_or_else(|| {
        let members: Vec<usize> = (0..polys.len())
            .filter(|&e| !supports[e].is_empty())
            .collect();
        (members, active.clone())
    })
}

/// Restricts polynomials to a local variable list (for handing a block to
/// the solver). Panics if a polynomial references a variable outside `vars`.
pub fn localize(
    polys: &[MultiPoly],
    global_vars: &Arc<Vec<Symbol>>,
    vars: &BTreeSet<usize>,
) -> (Arc<Vec<Symbol>>, Vec<MultiPoly>) {
    let order: Vec<usize> = vars.iter().copied().collect();
    let position: HashMap<usize, usize> = order
        .iter()
        .enumerate()
        .map(|(local, &global)| (global, local))
        .collect();
    let local_syms: Arc<Vec<Symbol>> =
        Arc::new(order.iter().map(|&g| global_vars[g].clone()).collect());
    let local_polys = polys
        .iter()
        .map(|p| {
            let mut out = MultiPoly::zero(local_syms.clone());
            for (e, c) in p.terms() {
                let mut exps = vec![0u16; order.len()];
                for (g, &k) in e.iter().enumerate() {
                    if k > 0 {
                        exps[position[&g]] = k;
                    }
                }
                out.insert_term(exps, c);
            }
            out
        })
        .collect();
    (local_syms, local_polys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::{default_orders, prolong, taylor_coefficients};
    use crate::parser::parse_model;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn toy() -> OdeModel {
        parse_model(
            "states: x\nparameters: mu\nequations:\n x' = -mu*x\noutputs:\n y1 = x^2 + x\n",
        )
        .unwrap()
    }

    fn toy_system(estimates: [f64; 3]) -> PolynomialSystem {
        let m = toy();
        let orders: BTreeMap<Symbol, u32> = [(Symbol::new("y1"), 2)].into();
        let ps = prolong(&m, &orders);
        let ests: BTreeMap<(Symbol, u32), f64> = estimates
            .iter()
            .enumerate()
            .map(|(k, v)| ((Symbol::new("y1"), k as u32), *v))
            .collect();
        build_estimation_system(&ps, &m, &ests, &BTreeMap::new(), 0.0).unwrap()
    }

    #[test]
    fn toy_system_has_expected_polynomials() {
        // With the paper's estimates the five equations are
        //   x0^2 + x0 - 2.00, 2*x1*x0 + x1 + 1.50, 2*(x1^2 + x0*x2) + x2 - 1.22,
        //   x1 + mu*x0, x2 + mu*x1,
        // all over {mu, x#0, x#1, x#2}.
        let sys = toy_system([2.00, -1.50, 1.22]);
        assert_eq!(sys.nvars(), 4);
        assert_eq!(sys.polys.len(), 5);
        assert!(sys.side_conditions.is_empty());

        // Check by evaluating at a generic point under both readings.
        let mu = 0.37;
        let x0 = 1.21;
        let x1 = -0.43;
        let x2 = 0.19;
        let point = [c(mu), c(x0), c(x1), c(x2)];
        let mut got: Vec<f64> = sys.polys.iter().map(|p| p.eval(&point).re).collect();
        let mut expect = vec![
            x0 * x0 + x0 - 2.00,
            2.0 * x1 * x0 + x1 + 1.50,
            2.0 * (x1 * x1 + x0 * x2) + x2 - 1.22,
            x1 + mu * x0,
            x2 + mu * x1,
        ];
        got.sort_by(f64::total_cmp);
        expect.sort_by(f64::total_cmp);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn exact_estimates_give_zero_residual_at_truth() {
        let m = toy();
        let params: BTreeMap<Symbol, f64> = [(Symbol::new("mu"), 0.5)].into();
        let x0: BTreeMap<Symbol, f64> = [(Symbol::new("x"), 1.0)].into();
        let tj = taylor_coefficients(&m, &params, &x0, &BTreeMap::new(), 0.0, 2).unwrap();
        let y = &tj.outputs[&Symbol::new("y1")];
        let sys = toy_system([y[0], y[1], y[2]]);
        // Truth point in variable order (mu, x#0, x#1, x#2).
        let xs = &tj.states[&Symbol::new("x")];
        let point = [c(0.5), c(xs[0]), c(xs[1]), c(xs[2])];
        assert!(sys.relative_residual(&point) < 1e-13);
    }

    #[test]
    fn rational_equation_clears_denominator_with_side_condition() {
        let m = parse_model(
            "states: x4\nparameters: k5, k6\nequations:\n x4' = -k5*x4/(k6 + x4)\noutputs:\n y1 = x4\n",
        )
        .unwrap();
        let orders = default_orders(&m);
        let ps = prolong(&m, &orders);
        let ests: BTreeMap<(Symbol, u32), f64> = ps
            .output_equations
            .keys()
            .map(|(o, k)| ((o.clone(), *k), 0.5 + *k as f64))
            .collect();
        let sys = build_estimation_system(&ps, &m, &ests, &BTreeMap::new(), 0.0).unwrap();
        // k6 + x4#0 recorded as a side condition.
        assert_eq!(sys.side_conditions.len(), 1);
        let k6 = sys.vars.iter().position(|s| s.as_str() == "k6").unwrap();
        let x40 = sys.vars.iter().position(|s| s.as_str() == "x4#0").unwrap();
        let mut point = vec![c(0.0); sys.nvars()];
        point[k6] = c(0.3);
        point[x40] = c(0.4);
        let d = sys.side_conditions[0].eval(&point);
        assert!((d - c(0.7)).norm() < 1e-12);

        // A root of the cleared constraint satisfies the rational equation.
        let x41 = sys.vars.iter().position(|s| s.as_str() == "x4#1").unwrap();
        let k5 = sys.vars.iter().position(|s| s.as_str() == "k5").unwrap();
        point[k5] = c(0.2);
        point[x41] = c(-0.2 * 0.4 / 0.7);
        let constraint = sys
            .polys
            .iter()
            .zip(&sys.kinds)
            .find(|(_, k)| matches!(k, EquationKind::JetConstraint(j) if j.order == 1))
            .unwrap()
            .0;
        assert!(constraint.eval(&point).norm() < 1e-12);
    }

    #[test]
    fn affine_elimination_pins_linear_unknowns() {
        // x + 2y - 3 = 0 and x - y = 0 pin x = y = 1 given one quadratic.
        let vars: Arc<Vec<Symbol>> =
            Arc::new(vec![Symbol::new("x"), Symbol::new("y"), Symbol::new("z")]);
        let x = MultiPoly::variable(vars.clone(), 0);
        let y = MultiPoly::variable(vars.clone(), 1);
        let z = MultiPoly::variable(vars.clone(), 2);
        let p1 = x.add(&y.scale(c(2.0))).sub(&MultiPoly::constant(vars.clone(), c(3.0)));
        let p2 = x.sub(&y);
        let p3 = z.mul(&z).sub(&x); // z^2 = x
        let reduced = eliminate_affine(&[p1, p2, p3], 3);
        assert_eq!(reduced.active.len(), 1);
        assert!(reduced.active.contains(&2));
        assert_eq!(reduced.polys.len(), 1);
        // Remaining equation is z^2 - 1.
        let val = reduced.polys[0].eval(&[c(0.0), c(0.0), c(2.0)]);
        assert!((val - c(3.0)).norm() < 1e-12);

        let mut values = vec![None, None, Some(c(1.0))];
        back_substitute(&reduced.substitutions, &mut values);
        assert!((values[0].unwrap() - c(1.0)).norm() < 1e-12);
        assert!((values[1].unwrap() - c(1.0)).norm() < 1e-12);
    }

    #[test]
    fn block_detection_finds_decoupled_subsystem() {
        // {x^2-1, x*y-2, y+z, z^2+y^2-w} : block {x} of size 1.
        let vars: Arc<Vec<Symbol>> = Arc::new(
            ["x", "y", "z", "w"].iter().map(|s| Symbol::new(*s)).collect(),
        );
        let x = MultiPoly::variable(vars.clone(), 0);
        let y = MultiPoly::variable(vars.clone(), 1);
        let z = MultiPoly::variable(vars.clone(), 2);
        let w = MultiPoly::variable(vars.clone(), 3);
        let polys = vec![
            x.mul(&x).sub(&MultiPoly::constant(vars.clone(), c(1.0))),
            x.mul(&y).sub(&MultiPoly::constant(vars.clone(), c(2.0))),
            y.add(&z),
            z.mul(&z).add(&y.mul(&y)).sub(&w),
        ];
        let active: BTreeSet<usize> = (0..4).collect();
        let (eqs, block_vars) = find_block(&polys, &active);
        assert_eq!(block_vars.len(), 1);
        assert!(block_vars.contains(&0));
        assert_eq!(eqs, vec![0]);
    }

    #[test]
    fn localize_preserves_evaluation() {
        let vars: Arc<Vec<Symbol>> = Arc::new(
            ["a", "b", "c"].iter().map(|s| Symbol::new(*s)).collect(),
        );
        let a = MultiPoly::variable(vars.clone(), 0);
        let b = MultiPoly::variable(vars.clone(), 2);
        let p = a.mul(&b).add(&a).sub(&MultiPoly::constant(vars.clone(), c(1.5)));
        let block: BTreeSet<usize> = [0usize, 2].into();
        let (local_vars, local) = localize(&[p.clone()], &vars, &block);
        assert_eq!(local_vars.len(), 2);
        let global_val = p.eval(&[c(0.7), c(99.0), c(1.3)]);
        let local_val = local[0].eval(&[c(0.7), c(1.3)]);
        assert!((global_val - local_val).norm() < 1e-14);
    }
}

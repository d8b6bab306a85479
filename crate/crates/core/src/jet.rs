//! Jet prolongation: differentiate the model equations formally, keeping
//! state derivatives as explicit jet unknowns, and compute exact Taylor
//! coefficients of trajectories.
//!
//! A jet variable `x#j` stands for the j-th time derivative of state `x` at
//! the evaluation time; `x#0` is the state value itself. The `#` separator
//! cannot appear in user identifiers, so jets never collide with model
//! symbols. Input derivatives use the same scheme (`u#j`).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::expr::{prod_of, Expr, Symbol};
use crate::model::OdeModel;
use crate::series::{eval_expr_series, Series, SeriesError};

/// A state (or input) derivative of a given order at the evaluation time.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JetVar {
    pub base: Symbol,
    pub order: u32,
}

impl JetVar {
    pub fn new(base: Symbol, order: u32) -> Self {
        JetVar { base, order }
    }

    pub fn symbol(&self) -> Symbol {
        Symbol::new(format!("{}#{}", self.base, self.order))
    }

    /// Recognizes a jet symbol of the form `name#order`.
    pub fn parse(sym: &Symbol) -> Option<JetVar> {
        let s = sym.as_str();
        let (base, order) = s.rsplit_once('#')?;
        if base.is_empty() {
            return None;
        }
        let order: u32 = order.parse().ok()?;
        Some(JetVar {
            base: Symbol::new(base),
            order,
        })
    }
}

/// One differentiated state equation in cleared form: `residual = 0` defines
/// the jet in `defines` given the lower-order jets and parameters. For a
/// polynomial right-hand side the residual is exactly `x#(j+1) - D^j(f)`;
/// rational right-hand sides are cleared by their denominator once at order
/// one and differentiated in cleared form, which keeps degrees from growing.
#[derive(Clone, Debug)]
pub struct JetConstraint {
    pub defines: JetVar,
    pub residual: Expr,
}

/// The differentiated system: output derivatives expressed in jet variables,
/// plus the constraints tying jets to the vector field.
#[derive(Clone, Debug)]
pub struct ProlongedSystem {
    /// `(output, k)` maps to the expression for `y^(k)` in jet variables.
    pub output_equations: BTreeMap<(Symbol, u32), Expr>,
    pub jet_constraints: Vec<JetConstraint>,
    pub orders: BTreeMap<Symbol, u32>,
    /// Denominators cleared while forming constraints; each must stay
    /// nonzero for the cleared system to be equivalent to the original.
    pub cleared_denominators: Vec<Expr>,
}

impl ProlongedSystem {
    /// Distinct jet variables appearing anywhere in the system.
    pub fn jet_variables(&self) -> BTreeSet<JetVar> {
        let mut syms = BTreeSet::new();
        for e in self.output_equations.values() {
            e.collect_symbols(&mut syms);
        }
        for c in &self.jet_constraints {
            c.residual.collect_symbols(&mut syms);
        }
        syms.iter().filter_map(JetVar::parse).collect()
    }

    pub fn equation_count(&self) -> usize {
        self.output_equations.len() + self.jet_constraints.len()
    }
}

/// Replaces bare state and input symbols by their order-0 jet symbols.
pub fn rename_to_jets(e: &Expr, m: &OdeModel) -> Expr {
    let mut map = HashMap::new();
    for s in m.states().iter().chain(m.inputs()) {
        map.insert(s.clone(), Expr::Sym(JetVar::new(s.clone(), 0).symbol()));
    }
    e.substitute(&map)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    StateOrInput,
    Parameter,
    Time,
    Other,
}

fn classify(m: &OdeModel, base: &Symbol) -> Role {
    if base == m.time() {
        Role::Time
    } else if m.states().contains(base) || m.inputs().contains(base) {
        Role::StateOrInput
    } else if m.parameters().contains(base) {
        Role::Parameter
    } else {
        Role::Other
    }
}

/// The formal prolongation derivative: jets shift up one order
/// (`x#j -> x#(j+1)`), bare states and inputs count as order-0 jets, time
/// differentiates to 1, parameters to 0.
pub fn jet_shift(e: &Expr, m: &OdeModel) -> Expr {
    e.derive_with(&|s: &Symbol| {
        if let Some(jet) = JetVar::parse(s) {
            if classify(m, &jet.base) == Role::StateOrInput {
                return Expr::Sym(JetVar::new(jet.base, jet.order + 1).symbol());
            }
        }
        match classify(m, s) {
            Role::StateOrInput => Expr::Sym(JetVar::new(s.clone(), 1).symbol()),
            Role::Time => Expr::one(),
            Role::Parameter | Role::Other => Expr::zero(),
        }
    })
    .simplify()
}

/// Total (Lie) derivative along trajectories: the formal shift with each
/// first-order state jet replaced by the corresponding right-hand side. The
/// result is expressed in jet variables.
pub fn total_derivative(e: &Expr, m: &OdeModel) -> Expr {
    let shifted = jet_shift(&rename_to_jets(e, m), m);
    let mut map = HashMap::new();
    for s in m.states() {
        map.insert(
            JetVar::new(s.clone(), 1).symbol(),
            rename_to_jets(m.state_rhs(s), m),
        );
    }
    shifted.substitute(&map).simplify()
}

/// Builds the differentiated system with per-output derivative orders.
pub fn prolong(m: &OdeModel, orders: &BTreeMap<Symbol, u32>) -> ProlongedSystem {
    let mut output_equations = BTreeMap::new();
    for o in m.outputs() {
        let nu = orders.get(o).copied().unwrap_or(0);
        let mut current = rename_to_jets(m.output_rhs(o), m).simplify();
        output_equations.insert((o.clone(), 0), current.clone());
        for k in 1..=nu {
            current = jet_shift(&current, m);
            output_equations.insert((o.clone(), k), current.clone());
        }
    }

    // First-order constraints in cleared form, one per state.
    let mut base_constraints: HashMap<Symbol, Expr> = HashMap::new();
    let mut cleared_denominators = Vec::new();
    for s in m.states() {
        let rhs = rename_to_jets(m.state_rhs(s), m);
        let (num, den) = rhs.as_fraction();
        let x1 = Expr::Sym(JetVar::new(s.clone(), 1).symbol());
        let residual = if den.is_one_const() {
            (x1 - num).simplify()
        } else {
            cleared_denominators.push(den.clone());
            (prod_of(vec![x1, den]) - num).simplify()
        };
        base_constraints.insert(s.clone(), residual);
    }

    // Close over the jets actually referenced: any jet of order >= 1 must be
    // defined by a constraint, and constraints reference further jets.
    let mut needed: BTreeMap<Symbol, u32> = BTreeMap::new();
    let mut note = |syms: &BTreeSet<Symbol>, needed: &mut BTreeMap<Symbol, u32>| {
        for s in syms {
            if let Some(jet) = JetVar::parse(s) {
                if m.states().contains(&jet.base) {
                    let entry = needed.entry(jet.base.clone()).or_insert(0);
                    *entry = (*entry).max(jet.order);
                }
            }
        }
    };
    for e in output_equations.values() {
        note(&e.symbols(), &mut needed);
    }

    let mut built: BTreeMap<(Symbol, u32), Expr> = BTreeMap::new();
    loop {
        let mut changed = false;
        for (state, max_order) in needed.clone() {
            for order in 1..=max_order {
                if built.contains_key(&(state.clone(), order)) {
                    continue;
                }
                // Constraint defining x#order is the (order-1)-fold shift of
                // the cleared first-order constraint.
                let mut residual = base_constraints[&state].clone();
                for _ in 1..order {
                    residual = jet_shift(&residual, m);
                }
                note(&residual.symbols(), &mut needed);
                built.insert((state.clone(), order), residual);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let jet_constraints = built
        .into_iter()
        .map(|((state, order), residual)| JetConstraint {
            defines: JetVar::new(state, order),
            residual,
        })
        .collect();

    ProlongedSystem {
        output_equations,
        jet_constraints,
        orders: orders.clone(),
        cleared_denominators,
    }
}

/// Smallest uniform derivative order that makes the differentiated system
/// overdetermined by at least one equation. The estimation pipeline escalates
/// from here when the squared system is rank-deficient or too expensive to
/// solve. Capped at `n + p + 2`.
pub fn default_orders(m: &OdeModel) -> BTreeMap<Symbol, u32> {
    let cap = max_order(m);
    let mut nu = 0u32;
    loop {
        let orders: BTreeMap<Symbol, u32> =
            m.outputs().iter().map(|o| (o.clone(), nu)).collect();
        let ps = prolong(m, &orders);
        let unknowns = m.parameters().len() + ps.jet_variables().len();
        if ps.equation_count() >= unknowns + 1 || nu >= cap {
            return orders;
        }
        nu += 1;
    }
}

/// Escalation ceiling for derivative orders.
pub fn max_order(m: &OdeModel) -> u32 {
    (m.states().len() + m.parameters().len() + 2) as u32
}

#[derive(Debug, Error)]
pub enum JetError {
    #[error("pole while computing Taylor coefficients: {0}")]
    Pole(#[from] SeriesError),
    #[error("state `{0}` has no initial value")]
    MissingState(String),
    #[error("parameter `{0}` has no value")]
    MissingParameter(String),
    #[error("input `{0}` has no derivative values")]
    MissingInput(String),
}

/// Exact Taylor data of a trajectory at one time point.
#[derive(Clone, Debug)]
pub struct TaylorJets {
    /// `x^(j)(t*)` per state, j = 0..=order.
    pub states: BTreeMap<Symbol, Vec<f64>>,
    /// `y^(k)(t*)` per output, k = 0..=order.
    pub outputs: BTreeMap<Symbol, Vec<f64>>,
}

/// Computes exact state and output derivatives at `t_star` by the Taylor
/// recurrence of the ODE. `input_jets` supplies derivative values
/// `u^(j)(t_star)` for models with inputs; leave empty otherwise.
pub fn taylor_coefficients(
    m: &OdeModel,
    params: &BTreeMap<Symbol, f64>,
    x_init: &BTreeMap<Symbol, f64>,
    input_jets: &BTreeMap<Symbol, Vec<f64>>,
    t_star: f64,
    order: u32,
) -> Result<TaylorJets, JetError> {
    let len = order as usize + 1;
    let mut env: HashMap<Symbol, Series> = HashMap::new();
    for p in m.parameters() {
        let v = params
            .get(p)
            .ok_or_else(|| JetError::MissingParameter(p.as_str().to_owned()))?;
        env.insert(p.clone(), Series::constant(*v, len));
    }
    for u in m.inputs() {
        let derivs = input_jets
            .get(u)
            .ok_or_else(|| JetError::MissingInput(u.as_str().to_owned()))?;
        let mut fact = 1.0;
        let coeffs: Vec<f64> = (0..len)
            .map(|j| {
                if j > 0 {
                    fact *= j as f64;
                }
                derivs.get(j).copied().unwrap_or(0.0) / fact
            })
            .collect();
        env.insert(u.clone(), Series::from_coeffs(coeffs));
    }
    env.insert(m.time().clone(), Series::variable(t_star, len));
    for s in m.states() {
        let v = x_init
            .get(s)
            .ok_or_else(|| JetError::MissingState(s.as_str().to_owned()))?;
        env.insert(s.clone(), Series::constant(*v, len));
    }

    // x'(t) = f(x) gives n * a_n = [eps^(n-1)] f(x-series).
    for n in 1..len {
        let mut next = Vec::new();
        for s in m.states() {
            let f = eval_expr_series(m.state_rhs(s), &env, n)?;
            next.push((s.clone(), f.coeff(n - 1) / n as f64));
        }
        for (s, coeff) in next {
            let series = env.get_mut(&s).unwrap();
            let mut coeffs = series.coeffs().to_vec();
            coeffs[n] = coeff;
            *series = Series::from_coeffs(coeffs);
        }
    }

    let mut states = BTreeMap::new();
    for s in m.states() {
        states.insert(s.clone(), env[s].derivative_values());
    }
    let mut outputs = BTreeMap::new();
    for o in m.outputs() {
        let g = eval_expr_series(m.output_rhs(o), &env, len)?;
        outputs.insert(o.clone(), g.derivative_values());
    }
    Ok(TaylorJets { states, outputs })
}

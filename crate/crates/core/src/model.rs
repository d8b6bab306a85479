//! ODE model and measured-data containers.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::expr::{Expr, Symbol};

/// Role of a declared symbol within a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymbolKind {
    State,
    Parameter,
    Input,
    Output,
    Time,
}

impl fmt::Display for SymbolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SymbolKind::State => "state",
            SymbolKind::Parameter => "parameter",
            SymbolKind::Input => "input",
            SymbolKind::Output => "output",
            SymbolKind::Time => "time",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct SymbolInfo {
    pub name: Symbol,
    pub kind: SymbolKind,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model must declare at least one state")]
    NoStates,
    #[error("model must declare at least one output")]
    NoOutputs,
    #[error("duplicate symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("duplicate equation for `{0}`")]
    DuplicateEquation(String),
    #[error("missing equation for {kind} `{name}`")]
    MissingEquation { kind: SymbolKind, name: String },
    #[error("equation for `{eq}` references undeclared symbol `{sym}`")]
    UndeclaredSymbol { eq: String, sym: String },
    #[error("equation for `{eq}` references output `{sym}`; outputs may not appear in right-hand sides")]
    OutputInRhs { eq: String, sym: String },
}

/// A rational ODE system: state equations `x' = f(x, u, mu)` and output
/// equations `y = g(x, u, mu)`. Immutable after construction.
#[derive(Clone, Debug)]
pub struct OdeModel {
    states: Vec<Symbol>,
    parameters: Vec<Symbol>,
    inputs: Vec<Symbol>,
    outputs: Vec<Symbol>,
    time: Symbol,
    state_rhs: HashMap<Symbol, Expr>,
    output_rhs: HashMap<Symbol, Expr>,
}

impl OdeModel {
    /// Validates and assembles a model. The time symbol is implicit and named
    /// `t`; it may appear in right-hand sides but cannot be redeclared.
    pub fn new(
        states: Vec<Symbol>,
        parameters: Vec<Symbol>,
        inputs: Vec<Symbol>,
        outputs: Vec<Symbol>,
        state_rhs: Vec<(Symbol, Expr)>,
        output_rhs: Vec<(Symbol, Expr)>,
    ) -> Result<Self, ModelError> {
        if states.is_empty() {
            return Err(ModelError::NoStates);
        }
        if outputs.is_empty() {
            return Err(ModelError::NoOutputs);
        }
        let time = Symbol::new("t");

        let mut seen: HashMap<Symbol, SymbolKind> = HashMap::new();
        seen.insert(time.clone(), SymbolKind::Time);
        let declare = |seen: &mut HashMap<Symbol, SymbolKind>,
                       names: &[Symbol],
                       kind: SymbolKind|
         -> Result<(), ModelError> {
            for n in names {
                if seen.insert(n.clone(), kind).is_some() {
                    return Err(ModelError::DuplicateSymbol(n.as_str().to_owned()));
                }
            }
            Ok(())
        };
        declare(&mut seen, &states, SymbolKind::State)?;
        declare(&mut seen, &parameters, SymbolKind::Parameter)?;
        declare(&mut seen, &inputs, SymbolKind::Input)?;
        declare(&mut seen, &outputs, SymbolKind::Output)?;

        let mut srhs = HashMap::new();
        for (name, expr) in state_rhs {
            if !states.contains(&name) {
                return Err(ModelError::UndeclaredSymbol {
                    eq: format!("{name}'"),
                    sym: name.as_str().to_owned(),
                });
            }
            if srhs.insert(name.clone(), expr).is_some() {
                return Err(ModelError::DuplicateEquation(format!("{name}'")));
            }
        }
        let mut orhs = HashMap::new();
        for (name, expr) in output_rhs {
            if !outputs.contains(&name) {
                return Err(ModelError::UndeclaredSymbol {
                    eq: name.as_str().to_owned(),
                    sym: name.as_str().to_owned(),
                });
            }
            if orhs.insert(name.clone(), expr).is_some() {
                return Err(ModelError::DuplicateEquation(name.as_str().to_owned()));
            }
        }
        for s in &states {
            if !srhs.contains_key(s) {
                return Err(ModelError::MissingEquation {
                    kind: SymbolKind::State,
                    name: s.as_str().to_owned(),
                });
            }
        }
        for o in &outputs {
            if !orhs.contains_key(o) {
                return Err(ModelError::MissingEquation {
                    kind: SymbolKind::Output,
                    name: o.as_str().to_owned(),
                });
            }
        }

        // Right-hand sides may reference states, parameters, inputs, and time;
        // outputs are measurement definitions and never feed back.
        for (name, expr) in srhs.iter().chain(orhs.iter()) {
            for sym in expr.symbols() {
                match seen.get(&sym) {
                    None => {
                        return Err(ModelError::UndeclaredSymbol {
                            eq: name.as_str().to_owned(),
                            sym: sym.as_str().to_owned(),
                        })
                    }
                    Some(SymbolKind::Output) => {
                        return Err(ModelError::OutputInRhs {
                            eq: name.as_str().to_owned(),
                            sym: sym.as_str().to_owned(),
                        })
                    }
                    _ => {}
                }
            }
        }

        Ok(OdeModel {
            states,
            parameters,
            inputs,
            outputs,
            time,
            state_rhs: srhs,
            output_rhs: orhs,
        })
    }

    pub fn states(&self) -> &[Symbol] {
        &self.states
    }

    pub fn parameters(&self) -> &[Symbol] {
        &self.parameters
    }

    pub fn inputs(&self) -> &[Symbol] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Symbol] {
        &self.outputs
    }

    pub fn time(&self) -> &Symbol {
        &self.time
    }

    pub fn state_rhs(&self, state: &Symbol) -> &Expr {
        &self.state_rhs[state]
    }

    pub fn output_rhs(&self, output: &Symbol) -> &Expr {
        &self.output_rhs[output]
    }

    pub fn symbol_table(&self) -> Vec<SymbolInfo> {
        let mut out = Vec::new();
        out.push(SymbolInfo {
            name: self.time.clone(),
            kind: SymbolKind::Time,
        });
        for (names, kind) in [
            (&self.states, SymbolKind::State),
            (&self.parameters, SymbolKind::Parameter),
            (&self.inputs, SymbolKind::Input),
            (&self.outputs, SymbolKind::Output),
        ] {
            for n in names {
                out.push(SymbolInfo {
                    name: n.clone(),
                    kind,
                });
            }
        }
        out
    }

    /// The unknowns the estimation pipeline solves for: parameters followed by
    /// initial state values, in declaration order.
    pub fn unknown_names(&self) -> Vec<Symbol> {
        self.parameters
            .iter()
            .chain(self.states.iter())
            .cloned()
            .collect()
    }
}

impl fmt::Display for OdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |names: &[Symbol]| {
            names
                .iter()
                .map(|s| s.as_str().to_owned())
                .collect::<Vec<_>>()
                .join(", ")
        };
        writeln!(f, "states:     {}", join(&self.states))?;
        writeln!(f, "parameters: {}", join(&self.parameters))?;
        if !self.inputs.is_empty() {
            writeln!(f, "inputs:     {}", join(&self.inputs))?;
        }
        writeln!(f, "equations:")?;
        for s in &self.states {
            writeln!(f, "  {}' = {}", s, self.state_rhs[s])?;
        }
        writeln!(f, "outputs:")?;
        for o in &self.outputs {
            writeln!(f, "  {} = {}", o, self.output_rhs[o])?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("time series needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("times must be strictly increasing (violated at index {0})")]
    NonIncreasing(usize),
    #[error("output `{output}` has {got} values for {expected} times")]
    LengthMismatch {
        output: String,
        got: usize,
        expected: usize,
    },
    #[error("value for output `{output}` at index {index} is not finite")]
    NotFinite { output: String, index: usize },
    #[error("time series has no output columns")]
    NoOutputs,
}

/// Measured output values on a strictly increasing time grid.
#[derive(Clone, Debug)]
pub struct TimeSeries {
    times: Vec<f64>,
    values: BTreeMap<String, Vec<f64>>,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, values: BTreeMap<String, Vec<f64>>) -> Result<Self, DataError> {
        if times.len() < 2 {
            return Err(DataError::TooShort(times.len()));
        }
        for i in 1..times.len() {
            if !(times[i] > times[i - 1]) {
                return Err(DataError::NonIncreasing(i));
            }
        }
        if values.is_empty() {
            return Err(DataError::NoOutputs);
        }
        for (output, vs) in &values {
            if vs.len() != times.len() {
                return Err(DataError::LengthMismatch {
                    output: output.clone(),
                    got: vs.len(),
                    expected: times.len(),
                });
            }
            if let Some(i) = vs.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NotFinite {
                    output: output.clone(),
                    index: i,
                });
            }
        }
        Ok(TimeSeries { times, values })
    }

    /// Constructor for internally generated data that may legitimately have a
    /// single sample; other invariants still checked.
    pub fn from_simulation(
        times: Vec<f64>,
        values: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self, DataError> {
        if times.len() == 1 {
            let mut doubled = times.clone();
            doubled.push(times[0] + 1.0);
            let padded = values
                .iter()
                .map(|(k, v)| (k.clone(), vec![v[0], v[0]]))
                .collect();
            let _ = TimeSeries::new(doubled, padded)?;
            return Ok(TimeSeries { times, values });
        }
        TimeSeries::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn outputs(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|k| k.as_str())
    }

    pub fn column(&self, output: &str) -> Option<&[f64]> {
        self.values.get(output).map(|v| v.as_slice())
    }

    pub fn span(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_states() {
        let err = OdeModel::new(
            vec![],
            vec![Symbol::new("mu")],
            vec![],
            vec![Symbol::new("y1")],
            vec![],
            vec![(Symbol::new("y1"), Expr::one())],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::NoStates));
    }

    #[test]
    fn rejects_output_in_rhs() {
        let err = OdeModel::new(
            vec![Symbol::new("x")],
            vec![],
            vec![],
            vec![Symbol::new("y1")],
            vec![(Symbol::new("x"), Expr::sym("y1"))],
            vec![(Symbol::new("y1"), Expr::sym("x"))],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::OutputInRhs { .. }));
    }

    #[test]
    fn rejects_undeclared_symbol() {
        let err = OdeModel::new(
            vec![Symbol::new("x")],
            vec![],
            vec![],
            vec![Symbol::new("y1")],
            vec![(Symbol::new("x"), Expr::sym("ghost"))],
            vec![(Symbol::new("y1"), Expr::sym("x"))],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::UndeclaredSymbol { .. }));
    }

    #[test]
    fn time_series_validation() {
        let mut vals = BTreeMap::new();
        vals.insert("y1".to_owned(), vec![1.0, 2.0]);
        assert!(TimeSeries::new(vec![0.0, 1.0], vals.clone()).is_ok());
        assert!(matches!(
            TimeSeries::new(vec![0.0], {
                let mut v = BTreeMap::new();
                v.insert("y1".to_owned(), vec![1.0]);
                v
            }),
            Err(DataError::TooShort(1))
        ));
        assert!(matches!(
            TimeSeries::new(vec![1.0, 1.0], vals.clone()),
            Err(DataError::NonIncreasing(1))
        ));
        vals.insert("y2".to_owned(), vec![1.0]);
        assert!(matches!(
            TimeSeries::new(vec![0.0, 1.0], vals),
            Err(DataError::LengthMismatch { .. })
        ));
    }
}

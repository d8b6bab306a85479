//! Parser for the plain-text model format.
//!
//! ```text
//! # toy model
//! states:     x
//! parameters: mu
//! equations:
//!   x' = -mu * x
//! outputs:
//!   y1 = x^2 + x
//! ```
//!
//! Sections: `states:`, `parameters:`, `inputs:` (optional), `equations:`,
//! `outputs:`. Expressions use identifiers, decimal/fraction literals,
//! `+ - * / ^` and parentheses; `^` takes integer exponents only. `#` starts
//! a line comment. Layout is free-form; statements may be separated by
//! newlines or `;`. Numeric literals are stored as exact rationals. The time
//! symbol `t` is implicit and may be used in right-hand sides.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use thiserror::Error;

use crate::expr::{Expr, Number, Symbol};
use crate::model::{ModelError, OdeModel};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("{line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ParseError {
    fn at(tok: &Token, msg: impl Into<String>) -> Self {
        ParseError::Syntax {
            line: tok.line,
            col: tok.col,
            msg: msg.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Number(BigRational),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    Colon,
    Prime,
    Equals,
    Eof,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    let mut line = 1usize;
    let mut col = 1usize;
    let mut chars = text.chars().peekable();

    macro_rules! push {
        ($tok:expr, $line:expr, $col:expr) => {
            out.push(Token {
                tok: $tok,
                line: $line,
                col: $col,
            })
        };
    }

    while let Some(&c) = chars.peek() {
        let (tline, tcol) = (line, col);
        match c {
            '\n' => {
                chars.next();
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => {
                chars.next();
                col += 1;
            }
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    chars.next();
                    col += 1;
                }
            }
            ';' => {
                // Statement separator; the grammar needs no explicit token.
                chars.next();
                col += 1;
            }
            '+' => {
                chars.next();
                col += 1;
                push!(Tok::Plus, tline, tcol);
            }
            '-' => {
                chars.next();
                col += 1;
                push!(Tok::Minus, tline, tcol);
            }
            '*' => {
                chars.next();
                col += 1;
                push!(Tok::Star, tline, tcol);
            }
            '/' => {
                chars.next();
                col += 1;
                push!(Tok::Slash, tline, tcol);
            }
            '^' => {
                chars.next();
                col += 1;
                push!(Tok::Caret, tline, tcol);
            }
            '(' => {
                chars.next();
                col += 1;
                push!(Tok::LParen, tline, tcol);
            }
            ')' => {
                chars.next();
                col += 1;
                push!(Tok::RParen, tline, tcol);
            }
            ',' => {
                chars.next();
                col += 1;
                push!(Tok::Comma, tline, tcol);
            }
            ':' => {
                chars.next();
                col += 1;
                push!(Tok::Colon, tline, tcol);
            }
            '\'' => {
                chars.next();
                col += 1;
                push!(Tok::Prime, tline, tcol);
            }
            '=' => {
                chars.next();
                col += 1;
                push!(Tok::Equals, tline, tcol);
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut name = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        name.push(c);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                push!(Tok::Ident(name), tline, tcol);
            }
            c if c.is_ascii_digit() => {
                let rational = lex_number(&mut chars, &mut col).map_err(|msg| {
                    ParseError::Syntax {
                        line: tline,
                        col: tcol,
                        msg,
                    }
                })?;
                push!(Tok::Number(rational), tline, tcol);
            }
            other => {
                return Err(ParseError::Syntax {
                    line: tline,
                    col: tcol,
                    msg: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

fn lex_number(
    chars: &mut std::iter::Peekable<std::str::Chars<'_>>,
    col: &mut usize,
) -> Result<BigRational, String> {
    let mut digits = String::new();
    let mut frac_digits = 0usize;
    let mut seen_dot = false;
    while let Some(&c) = chars.peek() {
        if c.is_ascii_digit() {
            digits.push(c);
            if seen_dot {
                frac_digits += 1;
            }
            chars.next();
            *col += 1;
        } else if c == '.' && !seen_dot {
            seen_dot = true;
            chars.next();
            *col += 1;
        } else {
            break;
        }
    }
    let mut exp: i64 = 0;
    if matches!(chars.peek(), Some('e') | Some('E')) {
        chars.next();
        *col += 1;
        let mut negative = false;
        if matches!(chars.peek(), Some('+') | Some('-')) {
            negative = chars.peek() == Some(&'-');
            chars.next();
            *col += 1;
        }
        let mut exp_digits = String::new();
        while let Some(&c) = chars.peek() {
            if c.is_ascii_digit() {
                exp_digits.push(c);
                chars.next();
                *col += 1;
            } else {
                break;
            }
        }
        if exp_digits.is_empty() {
            return Err("malformed exponent in numeric literal".to_owned());
        }
        exp = exp_digits
            .parse::<i64>()
            .map_err(|_| "exponent out of range".to_owned())?;
        if negative {
            exp = -exp;
        }
    }
    let mantissa: BigInt = digits
        .parse()
        .map_err(|_| "malformed numeric literal".to_owned())?;
    let mut value = BigRational::new(mantissa, BigInt::from(10u32).pow(frac_digits as u32));
    if exp != 0 {
        let p = BigInt::from(10u32).pow(exp.unsigned_abs() as u32);
        if exp > 0 {
            value *= BigRational::from_integer(p);
        } else {
            value /= BigRational::from_integer(p);
        }
    }
    Ok(value)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn peek2(&self) -> &Token {
        &self.tokens[(self.pos + 1).min(self.tokens.len() - 1)]
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Token, ParseError> {
        let t = self.advance();
        if t.tok == want {
            Ok(t)
        } else {
            Err(ParseError::at(&t, format!("expected {what}")))
        }
    }

    /// True when the cursor sits on `name :` for a section keyword.
    fn at_section(&self) -> bool {
        matches!(
            (&self.peek().tok, &self.peek2().tok),
            (Tok::Ident(name), Tok::Colon)
                if matches!(name.as_str(), "states" | "parameters" | "inputs" | "equations" | "outputs")
        )
    }

    fn parse_name_list(&mut self) -> Result<Vec<Symbol>, ParseError> {
        let mut names = Vec::new();
        loop {
            if self.at_section() || self.peek().tok == Tok::Eof {
                break;
            }
            let t = self.advance();
            match t.tok {
                Tok::Ident(name) => names.push(Symbol::new(name)),
                _ => return Err(ParseError::at(&t, "expected symbol name")),
            }
            if self.peek().tok == Tok::Comma {
                self.advance();
            } else {
                break;
            }
        }
        Ok(names)
    }

    fn parse_expr(&mut self) -> Result<Expr, ParseError> {
        let mut terms = vec![self.parse_term()?];
        loop {
            match self.peek().tok {
                Tok::Plus => {
                    self.advance();
                    terms.push(self.parse_term()?);
                }
                Tok::Minus => {
                    self.advance();
                    terms.push(Expr::Neg(Box::new(self.parse_term()?)));
                }
                _ => break,
            }
        }
        Ok(if terms.len() == 1 {
            terms.into_iter().next().unwrap()
        } else {
            Expr::Sum(terms)
        })
    }

    fn parse_term(&mut self) -> Result<Expr, ParseError> {
        let mut current = self.parse_unary()?;
        loop {
            match self.peek().tok {
                Tok::Star => {
                    self.advance();
                    let rhs = self.parse_unary()?;
                    current = match current {
                        Expr::Prod(mut fs) => {
                            fs.push(rhs);
                            Expr::Prod(fs)
                        }
                        other => Expr::Prod(vec![other, rhs]),
                    };
                }
                Tok::Slash => {
                    let slash = self.advance();
                    let rhs = self.parse_unary()?;
                    // Literal fractions fold to exact rational constants.
                    if let (Expr::Const(Number::Rational(a)), Expr::Const(Number::Rational(b))) =
                        (&current, &rhs)
                    {
                        if b.is_zero() {
                            return Err(ParseError::at(&slash, "division by zero in constant"));
                        }
                        current = Expr::Const(Number::Rational(a / b));
                        continue;
                    }
                    if rhs.is_zero_const() {
                        return Err(ParseError::at(&slash, "division by zero in constant"));
                    }
                    current = Expr::Div(Box::new(current), Box::new(rhs));
                }
                _ => break,
            }
        }
        Ok(current)
    }

    fn parse_unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek().tok == Tok::Minus {
            self.advance();
            return Ok(Expr::Neg(Box::new(self.parse_unary()?)));
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> Result<Expr, ParseError> {
        let mut base = self.parse_primary()?;
        while self.peek().tok == Tok::Caret {
            let caret = self.advance();
            let mut negative = false;
            if self.peek().tok == Tok::Minus {
                self.advance();
                negative = true;
            }
            let t = self.advance();
            let exp = match &t.tok {
                Tok::Number(r) if r.denom().is_one() => {
                    let n: i64 = num_traits::ToPrimitive::to_i64(r.numer()).ok_or_else(|| {
                        ParseError::Syntax {
                            line: t.line,
                            col: t.col,
                            msg: "exponent out of range".to_owned(),
                        }
                    })?;
                    if negative {
                        -n
                    } else {
                        n
                    }
                }
                _ => {
                    return Err(ParseError::at(
                        &caret,
                        "`^` takes integer exponents only",
                    ))
                }
            };
            let exp = i32::try_from(exp)
                .map_err(|_| ParseError::at(&caret, "exponent out of range"))?;
            base = base.pow_i(exp);
        }
        Ok(base)
    }

    fn parse_primary(&mut self) -> Result<Expr, ParseError> {
        let t = self.advance();
        match t.tok.clone() {
            Tok::Number(r) => Ok(Expr::Const(Number::Rational(r))),
            Tok::Ident(name) => {
                if self.peek().tok == Tok::LParen {
                    return Err(ParseError::at(
                        &t,
                        format!(
                            "function call `{name}(...)` is not supported: models must be \
                             rational (no exp, sin, log, ...)"
                        ),
                    ));
                }
                Ok(Expr::sym(name))
            }
            Tok::LParen => {
                let inner = self.parse_expr()?;
                self.expect(Tok::RParen, "closing `)`")?;
                Ok(inner)
            }
            _ => Err(ParseError::at(&t, "expected expression")),
        }
    }
}

/// Parses model text into a validated [`OdeModel`].
pub fn parse_model(text: &str) -> Result<OdeModel, ParseError> {
    let tokens = lex(text)?;
    let mut p = Parser { tokens, pos: 0 };

    let mut states = Vec::new();
    let mut parameters = Vec::new();
    let mut inputs = Vec::new();
    // Output names are declared implicitly by their equations.
    let mut state_rhs: Vec<(Symbol, Expr)> = Vec::new();
    let mut output_rhs: Vec<(Symbol, Expr)> = Vec::new();

    while p.peek().tok != Tok::Eof {
        let t = p.advance();
        let section = match &t.tok {
            Tok::Ident(name) => name.clone(),
            _ => return Err(ParseError::at(&t, "expected section header")),
        };
        p.expect(Tok::Colon, &format!("`:` after `{section}`"))?;
        match section.as_str() {
            "states" => states = p.parse_name_list()?,
            "parameters" => parameters = p.parse_name_list()?,
            "inputs" => inputs = p.parse_name_list()?,
            "equations" => {
                while !p.at_section() && p.peek().tok != Tok::Eof {
                    let t = p.advance();
                    let name = match t.tok {
                        Tok::Ident(name) => Symbol::new(name),
                        _ => return Err(ParseError::at(&t, "expected state equation `x' = ...`")),
                    };
                    p.expect(Tok::Prime, "`'` after state name")?;
                    p.expect(Tok::Equals, "`=`")?;
                    let rhs = p.parse_expr()?;
                    state_rhs.push((name, rhs));
                }
            }
            "outputs" => {
                while !p.at_section() && p.peek().tok != Tok::Eof {
                    let t = p.advance();
                    let name = match t.tok {
                        Tok::Ident(name) => Symbol::new(name),
                        _ => return Err(ParseError::at(&t, "expected output equation `y = ...`")),
                    };
                    p.expect(Tok::Equals, "`=`")?;
                    let rhs = p.parse_expr()?;
                    output_rhs.push((name, rhs));
                }
            }
            other => {
                return Err(ParseError::at(
                    &t,
                    format!("unknown section `{other}` (expected states, parameters, inputs, equations, outputs)"),
                ))
            }
        }
    }

    let mut outputs: Vec<Symbol> = Vec::new();
    for (name, _) in &output_rhs {
        if !outputs.contains(name) {
            outputs.push(name.clone());
        }
    }
    Ok(OdeModel::new(
        states, parameters, inputs, outputs, state_rhs, output_rhs,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelError;

    pub const TOY: &str = "
        states:     x
        parameters: mu
        equations:
          x' = -mu * x
        outputs:
          y1 = x^2 + x
    ";

    #[test]
    fn parses_toy_model() {
        let m = parse_model(TOY).unwrap();
        assert_eq!(m.states().len(), 1);
        assert_eq!(m.parameters().len(), 1);
        assert_eq!(m.outputs().len(), 1);
        let y = m.output_rhs(&Symbol::new("y1"));
        let mut b = crate::expr::Bindings::new();
        b.insert(Symbol::new("x"), 1.0);
        assert_eq!(y.eval(&b).unwrap(), 2.0);
    }

    #[test]
    fn parses_semicolon_layout() {
        let m = parse_model(
            "states: x; parameters: mu; equations: x' = -mu*x; outputs: y1 = x^2 + x",
        )
        .unwrap();
        assert_eq!(m.states().len(), 1);
    }

    #[test]
    fn rejects_empty_states() {
        let err = parse_model("states:\nparameters: mu\nequations:\noutputs: \n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("at least one state"), "got: {msg}");
    }

    #[test]
    fn rejects_undeclared_symbol() {
        let err = parse_model(
            "states: x\nparameters: mu\nequations:\n x' = -mu*z\noutputs:\n y1 = x\n",
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ParseError::Model(ModelError::UndeclaredSymbol { .. })
        ));
    }

    #[test]
    fn rejects_duplicate_equation() {
        let err = parse_model(
            "states: x\nparameters: mu\nequations:\n x' = -mu*x\n x' = x\noutputs:\n y1 = x\n",
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ParseError::Model(ModelError::DuplicateEquation(_))
        ));
    }

    #[test]
    fn rejects_transcendental_functions() {
        let err = parse_model(
            "states: x\nparameters: mu\nequations:\n x' = exp(x)\noutputs:\n y1 = x\n",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rational"), "got: {msg}");
        assert!(msg.contains("exp"), "got: {msg}");
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_model("states: x\nparameters: mu\nequations:\n x' = )\n").unwrap_err();
        match err {
            ParseError::Syntax { line, col, .. } => {
                assert_eq!(line, 4);
                assert!(col > 0);
            }
            other => panic!("expected syntax error, got {other}"),
        }
    }

    #[test]
    fn parses_lotka_volterra() {
        let text = "
            states:     r, w
            parameters: k1, k2, k3
            equations:
              r' = k1*r - k2*r*w
              w' = k2*r*w - k3*w
            outputs:
              y1 = r
        ";
        let m = parse_model(text).unwrap();
        assert_eq!(m.states().len(), 2);
        assert_eq!(m.parameters().len(), 3);
        assert_eq!(m.outputs().len(), 1);
        assert_eq!(m.output_rhs(&Symbol::new("y1")), &Expr::sym("r"));
    }

    #[test]
    fn decimal_literals_are_exact_rationals() {
        let m = parse_model(
            "states: x\nparameters: mu\nequations:\n x' = 0.58*x\noutputs:\n y1 = x\n",
        )
        .unwrap();
        let rhs = m.state_rhs(&Symbol::new("x"));
        match rhs {
            Expr::Prod(fs) => match &fs[0] {
                Expr::Const(Number::Rational(r)) => {
                    assert_eq!(r, &BigRational::new(BigInt::from(29), BigInt::from(50)));
                }
                other => panic!("expected rational constant, got {other}"),
            },
            other => panic!("expected product, got {other}"),
        }
    }

    #[test]
    fn parse_print_parse_is_idempotent() {
        for text in [
            TOY,
            "states: r, w\nparameters: k1, k2, k3\nequations:\n r' = k1*r - k2*r*w\n w' = k2*r*w - k3*w\noutputs:\n y1 = r\n",
            "states: x4, x5\nparameters: k5, k6\nequations:\n x4' = -k5*x4/(k6 + x4)\n x5' = k5*x4/(k6 + x4) - 1/3*x5\noutputs:\n y1 = x4\n y2 = x5 + 0.25\n",
        ] {
            let m1 = parse_model(text).unwrap();
            let printed = m1.to_string();
            let m2 = parse_model(&printed).unwrap();
            assert_eq!(printed, m2.to_string(), "pretty-print not stable");
            for s in m1.states() {
                assert_eq!(m1.state_rhs(s), m2.state_rhs(s), "state {s} differs");
            }
            for o in m1.outputs() {
                assert_eq!(m1.output_rhs(o), m2.output_rhs(o), "output {o} differs");
            }
        }
    }
}

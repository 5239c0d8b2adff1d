//! Arithmetic expressions over `t`, `W`, `x` (`x1`, `x2`) used for
//! coefficient specs in experiment configs.
//!
//! ```text
//! expr   = term { ("+" | "-") term } ;
//! term   = unary { ("*" | "/") unary } ;
//! unary  = [ "+" | "-" ] unary | atom ;
//! atom   = number | name | func "(" expr ")" | "(" expr ")" ;
//! func   = "sin" | "cos" | "exp" ;
//! name   = "t" | "W" | "x" | "x1" | "x2" | "pi" ;
//! ```

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Var {
    T,
    W,
    X1,
    X2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Exp,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A parsed expression.
#[derive(Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

struct Parser<'a> {
    field: &'a str,
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Config {
            field: self.field.to_string(),
            message: format!("{} at column {}", message.into(), self.pos + 1),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected '{}'", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(op as char, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op as char, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.name(),
            Some(c) => Err(self.error(format!("unexpected '{}'", c as char))),
            None => Err(self.error("unexpected end of expression")),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && matches!(self.src[self.pos], b'+' | b'-') {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii slice");
        text.parse::<f64>().map(Node::Num).map_err(|_| {
            self.pos = start;
            self.error(format!("malformed number '{text}'"))
        })
    }

    fn name(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii slice");
        let func = match name {
            "t" => return Ok(Node::Var(Var::T)),
            "W" => return Ok(Node::Var(Var::W)),
            "x" | "x1" => return Ok(Node::Var(Var::X1)),
            "x2" => return Ok(Node::Var(Var::X2)),
            "pi" => return Ok(Node::Num(std::f64::consts::PI)),
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            other => {
                self.pos = start;
                return Err(self.error(format!("unknown name '{other}'")));
            }
        };
        self.expect(b'(')?;
        let arg = self.expr()?;
        self.expect(b')')?;
        Ok(Node::Call(func, Box::new(arg)))
    }
}

impl Node {
    fn eval(&self, t: f64, w: f64, x: &[f64]) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var(Var::T) => t,
            Node::Var(Var::W) => w,
            Node::Var(Var::X1) => x.first().copied().unwrap_or(0.0),
            Node::Var(Var::X2) => x.get(1).copied().unwrap_or(0.0),
            Node::Neg(a) => -a.eval(t, w, x),
            Node::Bin(op, a, b) => {
                let (a, b) = (a.eval(t, w, x), b.eval(t, w, x));
                match op {
                    '+' => a + b,
                    '-' => a - b,
                    '*' => a * b,
                    _ => a / b,
                }
            }
            Node::Call(f, a) => {
                let a = a.eval(t, w, x);
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                }
            }
        }
    }

    fn uses(&self, var: Var) -> bool {
        match self {
            Node::Num(_) => false,
            Node::Var(v) => *v == var,
            Node::Neg(a) | Node::Call(_, a) => a.uses(var),
            Node::Bin(_, a, b) => a.uses(var) || b.uses(var),
        }
    }

    fn is_zero_literal(&self) -> bool {
        match self {
            Node::Num(v) => *v == 0.0,
            Node::Neg(a) => a.is_zero_literal(),
            _ => false,
        }
    }
}

impl Expr {
    /// Parses `source`; errors name `field` and the column.
    pub fn parse(field: &str, source: &str) -> Result<Self> {
        if !source.is_ascii() {
            return Err(Error::Config {
                field: field.to_string(),
                message: "expressions must be ASCII".into(),
            });
        }
        let mut p = Parser {
            field,
            src: source.as_bytes(),
            pos: 0,
        };
        let root = p.expr()?;
        if p.peek().is_some() {
            return Err(p.error("trailing input"));
        }
        Ok(Self {
            source: source.to_string(),
            root,
        })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            source: format!("{value}"),
            root: Node::Num(value),
        }
    }

    pub fn eval(&self, t: f64, w: f64, x: &[f64]) -> f64 {
        self.root.eval(t, w, x)
    }

    pub fn uses_time(&self) -> bool {
        self.root.uses(Var::T)
    }

    pub fn uses_noise(&self) -> bool {
        self.root.uses(Var::W)
    }

    pub fn uses_space(&self) -> bool {
        self.root.uses(Var::X1) || self.root.uses(Var::X2)
    }

    /// True for literal zeros such as `0` or `-0.0` (no evaluation involved).
    pub fn is_zero(&self) -> bool {
        self.root.is_zero_literal()
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str) -> f64 {
        Expr::parse("test", s).unwrap().eval(0.5, 2.0, &[0.25, 0.75])
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3"), 7.0);
        assert_eq!(ev("(1 + 2) * 3"), 9.0);
        assert_eq!(ev("8 / 4 / 2"), 1.0);
        assert_eq!(ev("5 - 3 - 1"), 1.0);
        assert_eq!(ev("-2 * -3"), 6.0);
        assert_eq!(ev("- -1"), 1.0);
        assert_eq!(ev("2.5e-1 + 1E1"), 10.25);
    }

    #[test]
    fn variables_and_functions() {
        assert_eq!(ev("t + W"), 2.5);
        assert_eq!(ev("x"), 0.25);
        assert_eq!(ev("x1 * x2"), 0.25 * 0.75);
        assert_eq!(ev("sin(0) + cos(0) + exp(0)"), 2.0);
        assert!((ev("sin(pi * x)") - (std::f64::consts::PI * 0.25).sin()).abs() < 1e-15);
        assert_eq!(ev("0.5 * (1 + 0.5 * sin(W))"), 0.5 * (1.0 + 0.5 * 2f64.sin()));
    }

    #[test]
    fn dependence_flags() {
        let e = Expr::parse("f", "x * exp(-t)").unwrap();
        assert!(e.uses_time() && e.uses_space() && !e.uses_noise());
        assert!(Expr::parse("f", "1 + W").unwrap().uses_noise());
        assert!(Expr::parse("f", "-0").unwrap().is_zero());
        assert!(!Expr::parse("f", "0 * W").unwrap().is_zero());
    }

    #[test]
    fn errors_name_field_and_column() {
        for (src, col) in [("1 +", 4), ("sin 1", 5), ("2 * y", 5), ("(1", 3), ("1 2", 3), ("1 $ 2", 3)] {
            match Expr::parse("coefficients.a", src) {
                Err(Error::Config { field, message }) => {
                    assert_eq!(field, "coefficients.a");
                    assert!(message.ends_with(&format!("column {col}")), "{src}: {message}");
                }
                other => panic!("{src}: {other:?}"),
            }
        }
    }
}

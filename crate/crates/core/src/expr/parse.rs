//! Infix parser for the expression grammar.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' integer)?
//! atom   := number | x<i> | u<j> | func '(' expr ')' | '(' expr ')'
//! func   := sin | cos | exp | sqrt
//! ```
//!
//! Subtrees whose operands are all constants are folded at parse time.

use thiserror::Error;

use super::{Expr, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown variable `{name}` at byte {offset}")]
    UnknownVariable { offset: usize, name: String },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. } | ParseError::UnknownVariable { offset, .. } => {
                *offset
            }
        }
    }
}

/// Parse `text` into an expression over `n` states and `m` inputs.
pub fn parse_expr(text: &str, n: usize, m: usize) -> Result<Expr, ParseError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        n,
        m,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    n: usize,
    m: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, message: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.pos,
            message: message.to_string(),
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

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                let rhs = self.term()?;
                lhs = fold(Expr::Add(Box::new(lhs), Box::new(rhs)));
            } else if self.eat(b'-') {
                let rhs = self.term()?;
                lhs = fold(Expr::Sub(Box::new(lhs), Box::new(rhs)));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                let rhs = self.unary()?;
                lhs = fold(Expr::Mul(Box::new(lhs), Box::new(rhs)));
            } else if self.eat(b'/') {
                let rhs = self.unary()?;
                lhs = fold(Expr::Div(Box::new(lhs), Box::new(rhs)));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat(b'-') {
            let inner = self.unary()?;
            return Ok(fold(Expr::Neg(Box::new(inner))));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if !self.eat(b'^') {
            return Ok(base);
        }
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("exponent must be a non-negative integer literal"));
        }
        if matches!(self.src.get(self.pos), Some(b'.') | Some(b'e') | Some(b'E')) {
            return Err(self.error("exponent must be a non-negative integer literal"));
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let k: u32 = text.parse().map_err(|_| ParseError::Syntax {
            offset: start,
            message: "exponent too large".into(),
        })?;
        if self.peek() == Some(b'^') {
            return Err(self.error("chained exponents need parentheses"));
        }
        Ok(fold(Expr::Pow(Box::new(base), k)))
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.identifier(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            while p.pos < p.src.len() && p.src[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
        };
        digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            digits(self);
        }
        if matches!(self.src.get(self.pos), Some(b'e') | Some(b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            let exp_start = self.pos;
            digits(self);
            if exp_start == self.pos {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| ParseError::Syntax {
                offset: start,
                message: format!("malformed number `{text}`"),
            })
    }

    fn identifier(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let func: Option<fn(Box<Expr>) -> Expr> = match name {
            "sin" => Some(Expr::Sin),
            "cos" => Some(Expr::Cos),
            "exp" => Some(Expr::Exp),
            "sqrt" => Some(Expr::Sqrt),
            _ => None,
        };
        if let Some(ctor) = func {
            if !self.eat(b'(') {
                return Err(self.error("expected `(` after function name"));
            }
            let arg = self.expr()?;
            if !self.eat(b')') {
                return Err(self.error("expected `)`"));
            }
            return Ok(fold(ctor(Box::new(arg))));
        }
        let unknown = || ParseError::UnknownVariable {
            offset: start,
            name: name.to_string(),
        };
        let (kind, index) = name.split_at(1);
        if index.is_empty() || !index.bytes().all(|b| b.is_ascii_digit()) || index.starts_with('0') {
            return Err(unknown());
        }
        let i: usize = index.parse().map_err(|_| unknown())?;
        match kind {
            "x" if i <= self.n => Ok(Expr::Var(Var::State(i - 1))),
            "u" if i <= self.m => Ok(Expr::Var(Var::Input(i - 1))),
            _ => Err(unknown()),
        }
    }
}

/// Evaluate a node whose children are all constants.
fn fold(e: Expr) -> Expr {
    let all_const = match &e {
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            a.as_const().is_some() && b.as_const().is_some()
        }
        Expr::Neg(a) | Expr::Pow(a, _) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) | Expr::Sqrt(a) => {
            a.as_const().is_some()
        }
        _ => false,
    };
    if !all_const {
        return e;
    }
    match e.eval(&[], &[]) {
        Ok(v) if v.is_finite() => Expr::Const(v),
        _ => e,
    }
}

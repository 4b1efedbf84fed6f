//! Closed-form scalar expressions over `(y1, y2, x3)`.
//!
//! Grammar: numbers, the variables `y1`, `y2`, `x3`, the constant `pi`,
//! binary `+ - * / ^`, unary minus, parentheses and the functions
//! `sin`, `cos`, `exp`, `log`, `sqrt`. `^` is right-associative and binds
//! tighter than unary minus, so `-y1^2` is `-(y1^2)`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{PlateError, Result};
use crate::jet::{Jet2, ScalarFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Y1,
    Y2,
    X3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A parsed expression; keeps its source text for echoing into manifests.
#[derive(Debug, Clone)]
pub struct Expr {
    source: String,
    root: Node,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(PlateError::Expression(format!(
                "unexpected trailing input in `{src}`"
            )));
        }
        Ok(Expr { source: src.trim().to_string(), root })
    }

    pub fn constant(c: f64) -> Self {
        Expr { source: format!("{c}"), root: Node::Num(c) }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Plain evaluation.
    pub fn eval(&self, y1: f64, y2: f64, x3: f64) -> f64 {
        eval_f64(&self.root, [y1, y2, x3])
    }

    /// Value, gradient and Hessian in `(y1, y2)` at fixed `x3`.
    pub fn jet(&self, y: [f64; 2], x3: f64) -> Jet2 {
        eval_jet(&self.root, y, x3)
    }

    /// Whether the expression mentions `x3`.
    pub fn depends_on_x3(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match n {
                Node::Num(_) => false,
                Node::Var(v) => *v == Var::X3,
                Node::Neg(a) | Node::Call(_, a) => walk(a),
                Node::Bin(_, a, b) => walk(a) || walk(b),
            }
        }
        walk(&self.root)
    }
}

impl ScalarFunction for Expr {
    fn jet(&self, y: [f64; 2]) -> Jet2 {
        eval_jet(&self.root, y, 0.0)
    }

    fn value(&self, y: [f64; 2]) -> f64 {
        eval_f64(&self.root, [y[0], y[1], 0.0])
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(c) => Ok(Expr::constant(c)),
            Raw::Text(t) => Expr::parse(&t).map_err(serde::de::Error::custom),
        }
    }
}

fn eval_f64(n: &Node, v: [f64; 3]) -> f64 {
    match n {
        Node::Num(c) => *c,
        Node::Var(Var::Y1) => v[0],
        Node::Var(Var::Y2) => v[1],
        Node::Var(Var::X3) => v[2],
        Node::Neg(a) => -eval_f64(a, v),
        Node::Bin(op, a, b) => {
            let x = eval_f64(a, v);
            match op {
                BinOp::Pow => match integer_exponent(b) {
                    Some(k) => x.powi(k),
                    None => x.powf(eval_f64(b, v)),
                },
                _ => {
                    let y = eval_f64(b, v);
                    match op {
                        BinOp::Add => x + y,
                        BinOp::Sub => x - y,
                        BinOp::Mul => x * y,
                        BinOp::Div => x / y,
                        BinOp::Pow => unreachable!(),
                    }
                }
            }
        }
        Node::Call(f, a) => {
            let x = eval_f64(a, v);
            match f {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Exp => x.exp(),
                Func::Log => x.ln(),
                Func::Sqrt => x.sqrt(),
            }
        }
    }
}

fn eval_jet(n: &Node, y: [f64; 2], x3: f64) -> Jet2 {
    match n {
        Node::Num(c) => Jet2::constant(*c),
        Node::Var(Var::Y1) => Jet2::variable(0, y[0]),
        Node::Var(Var::Y2) => Jet2::variable(1, y[1]),
        Node::Var(Var::X3) => Jet2::constant(x3),
        Node::Neg(a) => -eval_jet(a, y, x3),
        Node::Bin(op, a, b) => {
            let x = eval_jet(a, y, x3);
            if *op == BinOp::Pow {
                if let Some(k) = integer_exponent(b) {
                    return x.powi(k);
                }
                let e = eval_jet(b, y, x3);
                if e.g == [0.0; 2] && e.h == [0.0; 3] {
                    return x.powf(e.v);
                }
                return (e * x.ln()).exp();
            }
            let z = eval_jet(b, y, x3);
            match op {
                BinOp::Add => x + z,
                BinOp::Sub => x - z,
                BinOp::Mul => x * z,
                BinOp::Div => x / z,
                BinOp::Pow => unreachable!(),
            }
        }
        Node::Call(f, a) => {
            let x = eval_jet(a, y, x3);
            match f {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Exp => x.exp(),
                Func::Log => x.ln(),
                Func::Sqrt => x.sqrt(),
            }
        }
    }
}

fn integer_exponent(n: &Node) -> Option<i32> {
    let c = match n {
        Node::Num(c) => *c,
        Node::Neg(a) => match a.as_ref() {
            Node::Num(c) => -*c,
            _ => return None,
        },
        _ => return None,
    };
    (c.fract() == 0.0 && c.abs() < 64.0).then_some(c as i32)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| PlateError::Expression(format!("bad number `{text}`")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else if c == '(' {
            out.push(Tok::LParen);
            i += 1;
        } else if c == ')' {
            out.push(Tok::RParen);
            i += 1;
        } else {
            return Err(PlateError::Expression(format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Node::Num(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(PlateError::Expression("missing `)`".into())),
                }
            }
            Some(Tok::Ident(name)) => {
                let func = match name.as_str() {
                    "y1" => return Ok(Node::Var(Var::Y1)),
                    "y2" => return Ok(Node::Var(Var::Y2)),
                    "x3" => return Ok(Node::Var(Var::X3)),
                    "pi" => return Ok(Node::Num(std::f64::consts::PI)),
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    "exp" => Func::Exp,
                    "log" => Func::Log,
                    "sqrt" => Func::Sqrt,
                    other => {
                        return Err(PlateError::Expression(format!("unknown identifier `{other}`")))
                    }
                };
                match self.next() {
                    Some(Tok::LParen) => {}
                    _ => {
                        return Err(PlateError::Expression(format!(
                            "function `{name}` needs parentheses"
                        )))
                    }
                }
                let arg = self.expr()?;
                match self.next() {
                    Some(Tok::RParen) => Ok(Node::Call(func, Box::new(arg))),
                    _ => Err(PlateError::Expression("missing `)`".into())),
                }
            }
            Some(t) => Err(PlateError::Expression(format!("unexpected token {t:?}"))),
            None => Err(PlateError::Expression("unexpected end of expression".into())),
        }
    }
}

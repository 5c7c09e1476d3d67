//! Expression DSL for user-supplied scalar coefficients.
//!
//! Coefficients arrive as text in a config file and are parsed once into an
//! AST; evaluation is pure and total (a number or an [`EvalError`], never a
//! panic). Variables are free-form identifiers bound at evaluation time; the
//! conventional names are `t`, `x1..xn`, `y`, `z1..zd`, `j` and `e`.
//!
//! Grammar (EBNF, whitespace insignificant):
//!
//! ```text
//! expr   := term { ("+" | "-") term } ;
//! term   := factor { ("*" | "/") factor } ;
//! factor := "-" factor | power ;
//! power  := atom [ "^" factor ] ;            (* right-associative *)
//! atom   := number | ident | ident "(" expr { "," expr } ")" | "(" expr ")" ;
//! number := digits [ "." digits ] [ ("e"|"E") ["+"|"-"] digits ] ;
//! ```
//!
//! `^` binds tighter than unary minus, so `-x^2` is `-(x^2)`. Functions:
//! `sin`, `cos`, `exp`, `log` (natural), `abs`, `sqrt`, `tanh` (unary) and
//! `min`, `max` (binary).

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {msg}")]
    Syntax { offset: usize, msg: String },
    #[error("unknown function `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("variable `{0}` is not bound")]
    UnboundVariable(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite result in `{0}`")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Min,
    Max,
    Sqrt,
    Tanh,
}

impl Func {
    fn from_name(name: &str) -> Option<(Func, usize)> {
        Some(match name {
            "sin" => (Func::Sin, 1),
            "cos" => (Func::Cos, 1),
            "exp" => (Func::Exp, 1),
            "log" => (Func::Log, 1),
            "abs" => (Func::Abs, 1),
            "sqrt" => (Func::Sqrt, 1),
            "tanh" => (Func::Tanh, 1),
            "min" => (Func::Min, 2),
            "max" => (Func::Max, 2),
            _ => return None,
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
        }
    }
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

// ---------------------------------------------------------------------------
// scanner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

struct Scanner<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn next(&mut self) -> Result<(Tok, usize), ParseError> {
        self.skip_ws();
        let start = self.pos;
        if self.pos >= self.src.len() {
            return Ok((Tok::End, start));
        }
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'0'..=b'9' => return self.scan_number(start),
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
                {
                    end += 1;
                }
                let name = std::str::from_utf8(&self.src[start..end]).unwrap().to_owned();
                self.pos = end;
                return Ok((Tok::Ident(name), start));
            }
            other => {
                return Err(ParseError::Syntax {
                    offset: start,
                    msg: format!("unexpected character `{}`", other as char),
                })
            }
        };
        self.pos += 1;
        Ok((tok, start))
    }

    fn scan_number(&mut self, start: usize) -> Result<(Tok, usize), ParseError> {
        let mut end = self.pos;
        while end < self.src.len() && self.src[end].is_ascii_digit() {
            end += 1;
        }
        if end < self.src.len() && self.src[end] == b'.' {
            end += 1;
            while end < self.src.len() && self.src[end].is_ascii_digit() {
                end += 1;
            }
        }
        if end < self.src.len() && (self.src[end] == b'e' || self.src[end] == b'E') {
            let mut e = end + 1;
            if e < self.src.len() && (self.src[e] == b'+' || self.src[e] == b'-') {
                e += 1;
            }
            if e < self.src.len() && self.src[e].is_ascii_digit() {
                while e < self.src.len() && self.src[e].is_ascii_digit() {
                    e += 1;
                }
                end = e;
            }
        }
        let text = std::str::from_utf8(&self.src[start..end]).unwrap();
        let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
            offset: start,
            msg: format!("bad number literal `{text}`"),
        })?;
        self.pos = end;
        Ok((Tok::Num(value), start))
    }
}

// ---------------------------------------------------------------------------
// parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    scanner: Scanner<'a>,
    current: (Tok, usize),
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self, ParseError> {
        let mut scanner = Scanner::new(src);
        let current = scanner.next()?;
        Ok(Self { scanner, current })
    }

    fn advance(&mut self) -> Result<(Tok, usize), ParseError> {
        let prev = std::mem::replace(&mut self.current, (Tok::End, 0));
        self.current = self.scanner.next()?;
        Ok(prev)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.current.0 {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.advance()?;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.current.0 {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            self.advance()?;
            let rhs = self.factor()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.current.0 == Tok::Minus {
            self.advance()?;
            let inner = self.factor()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.current.0 == Tok::Caret {
            self.advance()?;
            // right-associative, and the exponent may carry a unary minus
            let exp = self.factor()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let (tok, offset) = self.advance()?;
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Ident(name) => {
                if self.current.0 == Tok::LParen {
                    let (func, arity) = Func::from_name(&name)
                        .ok_or(ParseError::UnknownIdentifier { name, offset })?;
                    self.advance()?; // consume '('
                    let mut args = vec![self.expr()?];
                    while self.current.0 == Tok::Comma {
                        self.advance()?;
                        args.push(self.expr()?);
                    }
                    let (tok, off) = self.advance()?;
                    if tok != Tok::RParen {
                        return Err(ParseError::Syntax {
                            offset: off,
                            msg: "expected `)` after call arguments".into(),
                        });
                    }
                    if args.len() != arity {
                        return Err(ParseError::Syntax {
                            offset,
                            msg: format!(
                                "`{}` takes {arity} argument(s), got {}",
                                func.name(),
                                args.len()
                            ),
                        });
                    }
                    Ok(Expr::Call(func, args))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Tok::LParen => {
                let inner = self.expr()?;
                let (tok, off) = self.advance()?;
                if tok != Tok::RParen {
                    return Err(ParseError::Syntax {
                        offset: off,
                        msg: "expected `)`".into(),
                    });
                }
                Ok(inner)
            }
            other => Err(ParseError::Syntax {
                offset,
                msg: format!("expected a value, found {other:?}"),
            }),
        }
    }
}

/// Parses an expression source string.
pub fn parse(source: &str) -> Result<Expr, ParseError> {
    let mut p = Parser::new(source)?;
    let e = p.expr()?;
    let (tok, offset) = p.advance()?;
    if tok != Tok::End {
        return Err(ParseError::Syntax {
            offset,
            msg: format!("trailing input starting with {tok:?}"),
        });
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

fn apply_bin(op: BinOp, l: f64, r: f64) -> Result<f64, EvalError> {
    let v = match op {
        BinOp::Add => l + r,
        BinOp::Sub => l - r,
        BinOp::Mul => l * r,
        BinOp::Div => {
            if r == 0.0 {
                return Err(EvalError::Domain("division by zero".into()));
            }
            l / r
        }
        BinOp::Pow => l.powf(r),
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite(format!("{op:?}")))
    }
}

fn apply_func(f: Func, args: &[f64]) -> Result<f64, EvalError> {
    let v = match f {
        Func::Sin => args[0].sin(),
        Func::Cos => args[0].cos(),
        Func::Exp => args[0].exp(),
        Func::Log => {
            if args[0] <= 0.0 {
                return Err(EvalError::Domain(format!("log of {}", args[0])));
            }
            args[0].ln()
        }
        Func::Abs => args[0].abs(),
        Func::Sqrt => {
            if args[0] < 0.0 {
                return Err(EvalError::Domain(format!("sqrt of {}", args[0])));
            }
            args[0].sqrt()
        }
        Func::Tanh => args[0].tanh(),
        Func::Min => args[0].min(args[1]),
        Func::Max => args[0].max(args[1]),
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite(f.name().into()))
    }
}

impl Expr {
    /// Evaluates with named bindings. All free variables must be bound.
    pub fn eval(&self, bindings: &[(&str, f64)]) -> Result<f64, EvalError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Var(name) => bindings
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| EvalError::UnboundVariable(name.clone())),
            Expr::Neg(inner) => Ok(-inner.eval(bindings)?),
            Expr::Bin(op, l, r) => apply_bin(*op, l.eval(bindings)?, r.eval(bindings)?),
            Expr::Call(f, args) => {
                let mut vals = [0.0; 2];
                for (i, a) in args.iter().enumerate() {
                    vals[i] = a.eval(bindings)?;
                }
                apply_func(*f, &vals[..args.len()])
            }
        }
    }

    /// Free variables in deterministic order.
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(name) => {
                out.insert(name.clone());
            }
            Expr::Neg(inner) => inner.collect_vars(out),
            Expr::Bin(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    /// Resolves variable names against a slot list for fast repeated
    /// evaluation. Fails with [`EvalError::UnboundVariable`] when the
    /// expression references a name outside the signature.
    pub fn compile(&self, signature: &[&str]) -> Result<CompiledExpr, EvalError> {
        let node = self.compile_node(signature)?;
        Ok(CompiledExpr { node })
    }

    fn compile_node(&self, signature: &[&str]) -> Result<CNode, EvalError> {
        Ok(match self {
            Expr::Num(v) => CNode::Num(*v),
            Expr::Var(name) => {
                let slot = signature
                    .iter()
                    .position(|s| s == name)
                    .ok_or_else(|| EvalError::UnboundVariable(name.clone()))?;
                CNode::Var(slot)
            }
            Expr::Neg(inner) => CNode::Neg(Box::new(inner.compile_node(signature)?)),
            Expr::Bin(op, l, r) => CNode::Bin(
                *op,
                Box::new(l.compile_node(signature)?),
                Box::new(r.compile_node(signature)?),
            ),
            Expr::Call(f, args) => CNode::Call(
                *f,
                args.iter()
                    .map(|a| a.compile_node(signature))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        })
    }
}

#[derive(Debug, Clone)]
enum CNode {
    Num(f64),
    Var(usize),
    Neg(Box<CNode>),
    Bin(BinOp, Box<CNode>, Box<CNode>),
    Call(Func, Vec<CNode>),
}

/// Expression with variable references resolved to slots of a value vector.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    node: CNode,
}

impl CompiledExpr {
    pub fn eval(&self, values: &[f64]) -> Result<f64, EvalError> {
        eval_cnode(&self.node, values)
    }

    /// Central finite difference in slot `slot`, step
    /// `1e-6 * max(1, |x|) * scale`. `values` is scratch and restored on
    /// return.
    pub fn num_grad(&self, slot: usize, values: &mut [f64], scale: f64) -> Result<f64, EvalError> {
        let x = values[slot];
        let h = 1e-6 * x.abs().max(1.0) * scale;
        values[slot] = x + h;
        let up = self.eval(values);
        values[slot] = x - h;
        let down = self.eval(values);
        values[slot] = x;
        Ok((up? - down?) / (2.0 * h))
    }

    /// True when the expression is the literal constant zero.
    pub fn is_const_zero(&self) -> bool {
        matches!(self.node, CNode::Num(v) if v == 0.0)
    }

    /// True when the expression references the slot.
    pub fn uses_slot(&self, slot: usize) -> bool {
        fn walk(n: &CNode, slot: usize) -> bool {
            match n {
                CNode::Num(_) => false,
                CNode::Var(s) => *s == slot,
                CNode::Neg(i) => walk(i, slot),
                CNode::Bin(_, l, r) => walk(l, slot) || walk(r, slot),
                CNode::Call(_, args) => args.iter().any(|a| walk(a, slot)),
            }
        }
        walk(&self.node, slot)
    }
}

fn eval_cnode(node: &CNode, values: &[f64]) -> Result<f64, EvalError> {
    match node {
        CNode::Num(v) => Ok(*v),
        CNode::Var(slot) => Ok(values[*slot]),
        CNode::Neg(inner) => Ok(-eval_cnode(inner, values)?),
        CNode::Bin(op, l, r) => apply_bin(*op, eval_cnode(l, values)?, eval_cnode(r, values)?),
        CNode::Call(f, args) => {
            let mut vals = [0.0; 2];
            for (i, a) in args.iter().enumerate() {
                vals[i] = eval_cnode(a, values)?;
            }
            apply_func(*f, &vals[..args.len()])
        }
    }
}

/// Central finite difference of `expr` in `var` at `bindings`, step
/// `1e-6 * max(1, |point|) * scale`.
pub fn num_grad(
    expr: &Expr,
    var: &str,
    bindings: &[(&str, f64)],
    scale: f64,
) -> Result<f64, EvalError> {
    let x = bindings
        .iter()
        .find(|(n, _)| *n == var)
        .map(|(_, v)| *v)
        .ok_or_else(|| EvalError::UnboundVariable(var.to_owned()))?;
    let h = 1e-6 * x.abs().max(1.0) * scale;
    let mut shifted: Vec<(&str, f64)> = bindings.to_vec();
    let slot = shifted.iter().position(|(n, _)| *n == var).unwrap();
    shifted[slot].1 = x + h;
    let up = expr.eval(&shifted)?;
    shifted[slot].1 = x - h;
    let down = expr.eval(&shifted)?;
    Ok((up - down) / (2.0 * h))
}

// ---------------------------------------------------------------------------
// printing
// ---------------------------------------------------------------------------

fn level(e: &Expr) -> u8 {
    match e {
        Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Neg(_) => 3,
        Expr::Bin(BinOp::Pow, ..) => 4,
        _ => 5,
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &Expr, needs_parens: bool) -> fmt::Result {
            if needs_parens {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(name) => write!(f, "{name}"),
            Expr::Neg(inner) => {
                write!(f, "-")?;
                child(f, inner, level(inner) < 3)
            }
            Expr::Bin(op, l, r) => {
                let my = level(self);
                let (sym, left_parens, right_parens) = match op {
                    // left-associative: a same-level right child was written
                    // with explicit parens, keep them so the tree reparses
                    BinOp::Add => ("+", level(l) < my, level(r) <= my),
                    BinOp::Sub => ("-", level(l) < my, level(r) <= my),
                    BinOp::Mul => ("*", level(l) < my, level(r) <= my),
                    BinOp::Div => ("/", level(l) < my, level(r) <= my),
                    // right-associative: same-level left child needs parens
                    BinOp::Pow => ("^", level(l) <= my, level(r) < 3),
                };
                child(f, l, left_parens)?;
                write!(f, "{sym}")?;
                child(f, r, right_parens)
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

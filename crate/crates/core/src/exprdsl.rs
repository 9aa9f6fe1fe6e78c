//! Scalar expression language for coefficients given in configuration files.
//!
//! Variables: `t`, `s` (1-based state), `x[i]`, `y[j]`, `z[j][k]` (1-based).
//! Operators: `+ - * / ^` and unary `-`, with unary minus binding tightest,
//! then `^` (right-associative), then `* /`, then `+ -`. Functions: `sin`,
//! `cos`, `tanh`, `exp`, `abs`, `min`, `max`, `pow`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::CoefficientSet;

pub const MAX_DEPTH: usize = 64;
const MAX_NESTING: usize = 256;

/// Index bounds an expression is checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scope {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    /// Whether `t` may appear (false for terminal conditions).
    pub time: bool,
}

impl Scope {
    pub fn new(n: usize, m: usize, d: usize) -> Self {
        Self { n, m, d, time: true }
    }

    /// Scope of a terminal condition: only `x` and `s`.
    pub fn terminal(n: usize, d: usize) -> Self {
        Self {
            n,
            m: 0,
            d,
            time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax(String),
    UnknownIdentifier(String),
    IndexOutOfRange { var: String, index: usize, bound: usize },
    DepthExceeded,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {}", describe(.kind))]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub line: usize,
    pub column: usize,
}

fn describe(kind: &ParseErrorKind) -> String {
    match kind {
        ParseErrorKind::Syntax(msg) => format!("syntax error: {msg}"),
        ParseErrorKind::UnknownIdentifier(id) => format!("unknown identifier `{id}`"),
        ParseErrorKind::IndexOutOfRange { var, index, bound } => {
            format!("index {index} of `{var}` out of range 1..={bound}")
        }
        ParseErrorKind::DepthExceeded => format!("expression deeper than {MAX_DEPTH}"),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{line}:{column}: {message} in `{snippet}`")]
    Domain {
        message: String,
        start: usize,
        end: usize,
        line: usize,
        column: usize,
        snippet: String,
    },
    #[error("context has (n, m, d) = {got:?}, expression expects {expected:?}")]
    Dimension {
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 3,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tanh,
    Exp,
    Abs,
    Min,
    Max,
    Pow,
}

impl Func {
    fn lookup(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "pow" => Func::Pow,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Pow => "pow",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max | Func::Pow => 2,
            _ => 1,
        }
    }
}

/// Variable and index payloads are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Num(f64),
    Time,
    State,
    X(usize),
    Y(usize),
    Z(usize, usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// AST node with the byte span it was parsed from. Equality ignores spans.
#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    pub start: usize,
    pub end: usize,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl Node {
    pub fn depth(&self) -> usize {
        1 + match &self.kind {
            NodeKind::Neg(a) => a.depth(),
            NodeKind::Bin(_, a, b) => a.depth().max(b.depth()),
            NodeKind::Call(_, args) => args.iter().map(Node::depth).max().unwrap_or(0),
            _ => 0,
        }
    }

    fn precedence(&self) -> u8 {
        match &self.kind {
            NodeKind::Bin(op, _, _) => op.precedence(),
            NodeKind::Neg(_) => 4,
            _ => 5,
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, node: &Node, paren: bool| {
            if paren {
                write!(f, "({node})")
            } else {
                write!(f, "{node}")
            }
        };
        match &self.kind {
            NodeKind::Num(v) => write!(f, "{v:?}"),
            NodeKind::Time => f.write_str("t"),
            NodeKind::State => f.write_str("s"),
            NodeKind::X(i) => write!(f, "x[{}]", i + 1),
            NodeKind::Y(j) => write!(f, "y[{}]", j + 1),
            NodeKind::Z(j, k) => write!(f, "z[{}][{}]", j + 1, k + 1),
            NodeKind::Neg(a) => {
                f.write_str("-")?;
                wrap(f, a, a.precedence() < 4)
            }
            NodeKind::Bin(op, a, b) => {
                let p = op.precedence();
                let (left, right) = if *op == BinOp::Pow {
                    (a.precedence() <= p, b.precedence() < p)
                } else {
                    (a.precedence() < p, b.precedence() <= p)
                };
                wrap(f, a, left)?;
                write!(f, " {} ", op.symbol())?;
                wrap(f, b, right)
            }
            NodeKind::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Parsed, immutable scalar expression.
#[derive(Debug, Clone)]
pub struct Expression {
    source: Arc<str>,
    scope: Scope,
    root: Node,
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.scope == other.scope && self.root == other.root
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

impl Expression {
    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

fn position(source: &str, offset: usize) -> (usize, usize) {
    let before = &source[..offset.min(source.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
    (line, column)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    tok: Tok,
    tok_start: usize,
    tok_end: usize,
    scope: Scope,
    nesting: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, kind: ParseErrorKind, at: usize) -> ParseError {
        let (line, column) = position(self.src, at);
        ParseError { kind, line, column }
    }

    fn syntax(&self, msg: impl Into<String>) -> ParseError {
        self.error(ParseErrorKind::Syntax(msg.into()), self.tok_start)
    }

    fn advance(&mut self) -> Result<(), ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && (bytes[self.pos] as char).is_ascii_whitespace() {
            self.pos += 1;
        }
        self.tok_start = self.pos;
        let Some(c) = self.src[self.pos..].chars().next() else {
            self.tok = Tok::End;
            self.tok_end = self.pos;
            return Ok(());
        };
        if c.is_ascii_digit() || c == '.' {
            let mut end = self.pos;
            while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
                end += 1;
            }
            if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
                let mut k = end + 1;
                if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                    k += 1;
                }
                if k < bytes.len() && bytes[k].is_ascii_digit() {
                    while k < bytes.len() && bytes[k].is_ascii_digit() {
                        k += 1;
                    }
                    end = k;
                }
            }
            let text = &self.src[self.pos..end];
            let v: f64 = text
                .parse()
                .map_err(|_| self.error(ParseErrorKind::Syntax(format!("malformed number `{text}`")), self.pos))?;
            if !v.is_finite() {
                return Err(self.error(ParseErrorKind::Syntax(format!("number `{text}` out of range")), self.pos));
            }
            self.tok = Tok::Num(v);
            self.pos = end;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let mut end = self.pos;
            while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                end += 1;
            }
            self.tok = Tok::Ident(self.src[self.pos..end].to_string());
            self.pos = end;
        } else if "+-*/^()[],".contains(c) {
            self.tok = Tok::Sym(c);
            self.pos += 1;
        } else {
            return Err(self.error(ParseErrorKind::Syntax(format!("unexpected character `{c}`")), self.pos));
        }
        self.tok_end = self.pos;
        Ok(())
    }

    fn expect(&mut self, c: char) -> Result<usize, ParseError> {
        if self.tok != Tok::Sym(c) {
            return Err(self.syntax(format!("expected `{c}`, found {}", self.found())));
        }
        let end = self.tok_end;
        self.advance()?;
        Ok(end)
    }

    fn found(&self) -> String {
        match &self.tok {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Sym(c) => format!("`{c}`"),
            Tok::End => "end of input".into(),
        }
    }

    fn node(&self, kind: NodeKind, start: usize, end: usize) -> Result<Node, ParseError> {
        let node = Node { kind, start, end };
        if node.depth() > MAX_DEPTH {
            return Err(self.error(ParseErrorKind::DepthExceeded, start));
        }
        Ok(node)
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.nesting += 1;
        if self.nesting > MAX_NESTING {
            return Err(self.error(ParseErrorKind::DepthExceeded, self.tok_start));
        }
        Ok(())
    }

    fn sum(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.tok {
                Tok::Sym('+') => BinOp::Add,
                Tok::Sym('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.advance()?;
            let rhs = self.product()?;
            let (start, end) = (lhs.start, rhs.end);
            lhs = self.node(NodeKind::Bin(op, Box::new(lhs), Box::new(rhs)), start, end)?;
        }
    }

    fn product(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.power()?;
        loop {
            let op = match self.tok {
                Tok::Sym('*') => BinOp::Mul,
                Tok::Sym('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.advance()?;
            let rhs = self.power()?;
            let (start, end) = (lhs.start, rhs.end);
            lhs = self.node(NodeKind::Bin(op, Box::new(lhs), Box::new(rhs)), start, end)?;
        }
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.unary()?;
        if self.tok != Tok::Sym('^') {
            return Ok(base);
        }
        self.advance()?;
        self.enter()?;
        let exp = self.power()?;
        self.nesting -= 1;
        let (start, end) = (base.start, exp.end);
        self.node(NodeKind::Bin(BinOp::Pow, Box::new(base), Box::new(exp)), start, end)
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.tok == Tok::Sym('-') {
            let start = self.tok_start;
            self.advance()?;
            self.enter()?;
            let inner = self.unary()?;
            self.nesting -= 1;
            let end = inner.end;
            return self.node(NodeKind::Neg(Box::new(inner)), start, end);
        }
        self.primary()
    }

    fn index(&mut self, var: &str, bound: usize, at: usize) -> Result<usize, ParseError> {
        self.expect('[')?;
        let Tok::Num(v) = self.tok else {
            return Err(self.syntax(format!("expected an index, found {}", self.found())));
        };
        let text = &self.src[self.tok_start..self.tok_end];
        if !text.bytes().all(|b| b.is_ascii_digit()) {
            return Err(self.syntax(format!("index `{text}` is not a positive integer")));
        }
        self.advance()?;
        self.expect(']')?;
        let index = v as usize;
        if index == 0 || index > bound {
            return Err(self.error(
                ParseErrorKind::IndexOutOfRange {
                    var: var.into(),
                    index,
                    bound,
                },
                at,
            ));
        }
        Ok(index - 1)
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let start = self.tok_start;
        match self.tok.clone() {
            Tok::Num(v) => {
                let end = self.tok_end;
                self.advance()?;
                self.node(NodeKind::Num(v), start, end)
            }
            Tok::Sym('(') => {
                self.advance()?;
                self.enter()?;
                let mut inner = self.sum()?;
                self.nesting -= 1;
                let end = self.expect(')')?;
                inner.start = start;
                inner.end = end;
                Ok(inner)
            }
            Tok::Ident(name) => {
                let end = self.tok_end;
                self.advance()?;
                let sc = self.scope;
                let kind = match name.as_str() {
                    "t" if sc.time => NodeKind::Time,
                    "s" => NodeKind::State,
                    "x" => NodeKind::X(self.index("x", sc.n, start)?),
                    "y" if sc.m > 0 => NodeKind::Y(self.index("y", sc.m, start)?),
                    "z" if sc.m > 0 => {
                        let j = self.index("z", sc.m, start)?;
                        NodeKind::Z(j, self.index("z", sc.d, start)?)
                    }
                    other => match Func::lookup(other) {
                        Some(func) => return self.call(func, start),
                        None => {
                            return Err(self.error(ParseErrorKind::UnknownIdentifier(other.into()), start));
                        }
                    },
                };
                let end = if matches!(kind, NodeKind::Time | NodeKind::State) {
                    end
                } else {
                    self.prev_end()
                };
                self.node(kind, start, end)
            }
            _ => Err(self.syntax(format!("expected an operand, found {}", self.found()))),
        }
    }

    /// End of the last consumed token.
    fn prev_end(&self) -> usize {
        self.src[..self.tok_start].trim_end().len()
    }

    fn call(&mut self, func: Func, start: usize) -> Result<Node, ParseError> {
        self.expect('(')?;
        self.enter()?;
        let mut args = vec![self.sum()?];
        while self.tok == Tok::Sym(',') {
            self.advance()?;
            args.push(self.sum()?);
        }
        self.nesting -= 1;
        let end = self.expect(')')?;
        if args.len() != func.arity() {
            return Err(self.error(
                ParseErrorKind::Syntax(format!(
                    "`{}` takes {} argument(s), got {}",
                    func.name(),
                    func.arity(),
                    args.len()
                )),
                start,
            ));
        }
        self.node(NodeKind::Call(func, args), start, end)
    }
}

/// Parses `source` against the index bounds of `scope`.
pub fn parse(source: &str, scope: Scope) -> Result<Expression, ParseError> {
    let mut p = Parser {
        src: source,
        pos: 0,
        tok: Tok::End,
        tok_start: 0,
        tok_end: 0,
        scope,
        nesting: 0,
    };
    p.advance()?;
    let root = p.sum()?;
    if p.tok != Tok::End {
        return Err(p.syntax(format!("unexpected {} after expression", p.found())));
    }
    Ok(Expression {
        source: source.into(),
        scope,
        root,
    })
}

/// Point at which an expression is evaluated.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub t: f64,
    /// 0-based; the language exposes it as `s = state + 1`.
    pub state: usize,
    pub x: &'a DVector<f64>,
    pub y: &'a DVector<f64>,
    pub z: &'a DMatrix<f64>,
}

impl Expression {
    /// Evaluates the expression. Division by zero and any non-finite
    /// intermediate are reported with the span of the offending node.
    pub fn evaluate(&self, ctx: &EvalContext<'_>) -> Result<f64, EvalError> {
        let sc = self.scope;
        let got = (ctx.x.len(), ctx.y.len(), ctx.z.ncols());
        let z_ok = ctx.z.nrows() == sc.m || sc.m == 0;
        if ctx.x.len() != sc.n || (sc.m > 0 && (ctx.y.len() != sc.m || ctx.z.ncols() != sc.d)) || !z_ok {
            return Err(EvalError::Dimension {
                got,
                expected: (sc.n, sc.m, sc.d),
            });
        }
        if ctx.state >= sc.d {
            return Err(EvalError::Dimension {
                got: (ctx.x.len(), ctx.y.len(), ctx.state + 1),
                expected: (sc.n, sc.m, sc.d),
            });
        }
        self.eval(&self.root, ctx)
    }

    fn domain(&self, node: &Node, message: String) -> EvalError {
        let (line, column) = position(&self.source, node.start);
        EvalError::Domain {
            message,
            start: node.start,
            end: node.end,
            line,
            column,
            snippet: self.source[node.start..node.end].to_string(),
        }
    }

    fn eval(&self, node: &Node, ctx: &EvalContext<'_>) -> Result<f64, EvalError> {
        let v = match &node.kind {
            NodeKind::Num(v) => *v,
            NodeKind::Time => ctx.t,
            NodeKind::State => (ctx.state + 1) as f64,
            NodeKind::X(i) => ctx.x[*i],
            NodeKind::Y(j) => ctx.y[*j],
            NodeKind::Z(j, k) => ctx.z[(*j, *k)],
            NodeKind::Neg(a) => -self.eval(a, ctx)?,
            NodeKind::Bin(op, a, b) => {
                let (a, b) = (self.eval(a, ctx)?, self.eval(b, ctx)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(self.domain(node, "division by zero".into()));
                        }
                        a / b
                    }
                    BinOp::Pow => a.powf(b),
                }
            }
            NodeKind::Call(func, args) => {
                let a = self.eval(&args[0], ctx)?;
                let b = match args.get(1) {
                    Some(arg) => self.eval(arg, ctx)?,
                    None => 0.0,
                };
                match func {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Tanh => a.tanh(),
                    Func::Exp => a.exp(),
                    Func::Abs => a.abs(),
                    Func::Min => a.min(b),
                    Func::Max => a.max(b),
                    Func::Pow => a.powf(b),
                }
            }
        };
        if !v.is_finite() {
            return Err(self.domain(node, format!("non-finite result {v}")));
        }
        Ok(v)
    }
}

/// Coefficients written as expressions, one per component. `sigma` is
/// given row by row (`n` rows of `d` entries); `phi` may use only `x` and
/// `s`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExprCoefficients {
    pub b: Vec<String>,
    pub sigma: Vec<Vec<String>>,
    pub f: Vec<String>,
    pub phi: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprCoefficientError {
    #[error("{component}[{index}]: {source}")]
    Parse {
        component: &'static str,
        index: String,
        source: ParseError,
    },
    #[error("`{component}` has {got} entries, expected {expected}")]
    Shape {
        component: &'static str,
        got: usize,
        expected: usize,
    },
}

fn parse_list(
    component: &'static str,
    list: &[String],
    len: usize,
    scope: Scope,
) -> Result<Vec<Expression>, ExprCoefficientError> {
    if list.len() != len {
        return Err(ExprCoefficientError::Shape {
            component,
            got: list.len(),
            expected: len,
        });
    }
    list.iter()
        .enumerate()
        .map(|(i, src)| {
            parse(src, scope).map_err(|source| ExprCoefficientError::Parse {
                component,
                index: (i + 1).to_string(),
                source,
            })
        })
        .collect()
}

impl ExprCoefficients {
    /// Parses every component and wraps them as a coefficient set.
    pub fn compile(&self, n: usize, m: usize, d: usize) -> Result<CoefficientSet, ExprCoefficientError> {
        let scope = Scope::new(n, m, d);
        let b = Arc::new(parse_list("b", &self.b, n, scope)?);
        let f = Arc::new(parse_list("f", &self.f, m, scope)?);
        let phi = Arc::new(parse_list("phi", &self.phi, m, Scope::terminal(n, d))?);
        if self.sigma.len() != n {
            return Err(ExprCoefficientError::Shape {
                component: "sigma",
                got: self.sigma.len(),
                expected: n,
            });
        }
        let mut sigma = Vec::with_capacity(n * d);
        for (r, row) in self.sigma.iter().enumerate() {
            let parsed = parse_list("sigma", row, d, scope).map_err(|e| match e {
                ExprCoefficientError::Parse { source, index, .. } => ExprCoefficientError::Parse {
                    component: "sigma",
                    index: format!("{}][{index}", r + 1),
                    source,
                },
                other => other,
            })?;
            sigma.extend(parsed);
        }
        let sigma = Arc::new(sigma);
        let vector = |list: &[Expression], ctx: &EvalContext<'_>| -> Result<DVector<f64>, String> {
            let vals = list
                .iter()
                .map(|e| e.evaluate(ctx).map_err(|err| err.to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(DVector::from_vec(vals))
        };
        let empty_y = DVector::zeros(0);
        let empty_z = DMatrix::zeros(0, d);
        Ok(CoefficientSet::zero(n, m, d)
            .with_b_fallible(move |t, s, x, y, z| vector(&b, &EvalContext { t, state: s, x, y, z }))
            .with_sigma_fallible(move |t, s, x, y, z| {
                let ctx = EvalContext { t, state: s, x, y, z };
                let mut out = DMatrix::zeros(n, d);
                for (i, e) in sigma.iter().enumerate() {
                    out[(i / d, i % d)] = e.evaluate(&ctx).map_err(|err| err.to_string())?;
                }
                Ok(out)
            })
            .with_f_fallible(move |t, s, x, y, z| vector(&f, &EvalContext { t, state: s, x, y, z }))
            .with_phi_fallible(move |s, x| {
                vector(
                    &phi,
                    &EvalContext {
                        t: 0.0,
                        state: s,
                        x,
                        y: &empty_y,
                        z: &empty_z,
                    },
                )
            }))
    }
}

//! Analytic scalar expressions in the variables `x`, `y`, `t`.
//!
//! Problem configurations describe exponents, weights and sources as small
//! closed-form expressions ("2 + 1/(1+t^2)", "pi^2*sin(pi*x)", ...). The
//! grammar is fixed: no user functions, no assignment, just arithmetic,
//! `min`/`max` and a handful of unary functions. Precedence is
//! `^` > unary `-` > `*`,`/` > `+`,`-`, with `^` right-associative.
//!
//! Parsed expressions are immutable and evaluation is re-entrant, so a single
//! [`ExprAst`] can be shared freely between threads.

use std::fmt;

use thiserror::Error;

/// Variables an expression may reference. `t` is the scalar the library
/// substitutes for the coupling quantity (`|∇u|` or `u`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X,
    Y,
    T,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::Y => "y",
            Var::T => "t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Sqrt,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Abs => "abs",
            UnaryOp::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Unary(UnaryOp, Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
}

/// One step of the compiled postfix program; evaluation runs these on a
/// small value stack instead of walking the boxed tree.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Instr {
    Push(f64),
    Load(Var),
    Unary(UnaryOp),
    Binary(BinOp),
}

/// A parsed expression.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprAst {
    root: Node,
    code: Vec<Instr>,
    source: String,
}

/// Values bound to the free variables during evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Binding {
    x: Option<f64>,
    y: Option<f64>,
    t: Option<f64>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn x(mut self, v: f64) -> Self {
        self.x = Some(v);
        self
    }

    pub fn y(mut self, v: f64) -> Self {
        self.y = Some(v);
        self
    }

    pub fn t(mut self, v: f64) -> Self {
        self.t = Some(v);
        self
    }

    fn get(&self, var: Var) -> Option<f64> {
        match var {
            Var::X => self.x,
            Var::Y => self.y,
            Var::T => self.t,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier '{name}' at offset {offset}")]
    UnknownIdent { name: String, offset: usize },
    #[error("'{name}' expects {expected} argument(s), found {found} (offset {offset})")]
    Arity {
        name: String,
        expected: usize,
        found: usize,
        offset: usize,
    },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("unbound variable '{}'", .0.name())]
    Unbound(Var),
    #[error("domain error: {op}({arg}) undefined")]
    Domain { op: &'static str, arg: f64 },
    #[error("expression evaluated to a non-finite value")]
    NonFinite,
}

// ---------------------------------------------------------------------------
// Tokenizer
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
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    offset: usize,
}

fn tokenize(src: &str) -> Result<Vec<Spanned>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let offset = i;
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                i += 1;
            }
            '+' => {
                out.push(Spanned { tok: Tok::Plus, offset });
                i += 1;
            }
            '-' | '−' if c == '-' => {
                out.push(Spanned { tok: Tok::Minus, offset });
                i += 1;
            }
            '*' => {
                out.push(Spanned { tok: Tok::Star, offset });
                i += 1;
            }
            '/' => {
                out.push(Spanned { tok: Tok::Slash, offset });
                i += 1;
            }
            '^' => {
                out.push(Spanned { tok: Tok::Caret, offset });
                i += 1;
            }
            '(' => {
                out.push(Spanned { tok: Tok::LParen, offset });
                i += 1;
            }
            ')' => {
                out.push(Spanned { tok: Tok::RParen, offset });
                i += 1;
            }
            ',' => {
                out.push(Spanned { tok: Tok::Comma, offset });
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    offset: start,
                    message: format!("malformed number '{text}'"),
                })?;
                out.push(Spanned { tok: Tok::Num(value), offset: start });
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Spanned {
                    tok: Tok::Ident(src[start..i].to_string()),
                    offset: start,
                });
            }
            _ => {
                return Err(ParseError::Syntax {
                    offset,
                    message: format!("unexpected character '{c}'"),
                })
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Recursive descent parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    toks: &'a [Spanned],
    pos: usize,
    src_len: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn offset(&self) -> usize {
        self.toks
            .get(self.pos)
            .map(|s| s.offset)
            .unwrap_or(self.src_len)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|s| s.tok.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(ParseError::Syntax {
                offset: self.offset(),
                message: format!("expected {what}"),
            })
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Node::Binary(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Node::Binary(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Node::Binary(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Node::Binary(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // Unary minus binds below `^`, so `-x^2` is `-(x^2)`.
    fn unary(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.pos += 1;
                let inner = self.unary()?;
                Ok(Node::Unary(UnaryOp::Neg, Box::new(inner)))
            }
            Some(Tok::Plus) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.atom()?;
        if self.peek() == Some(&Tok::Caret) {
            self.pos += 1;
            // Right associative; the exponent may start with a unary sign.
            let exp = self.unary()?;
            Ok(Node::Binary(BinOp::Pow, Box::new(base), Box::new(exp)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        let offset = self.offset();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Node::Num(v)),
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => self.ident(name, offset),
            _ => Err(ParseError::Syntax {
                offset,
                message: "expected a number, variable, function or '('".into(),
            }),
        }
    }

    fn ident(&mut self, name: String, offset: usize) -> Result<Node, ParseError> {
        match name.as_str() {
            "x" => return Ok(Node::Var(Var::X)),
            "y" => return Ok(Node::Var(Var::Y)),
            "t" => return Ok(Node::Var(Var::T)),
            "pi" => return Ok(Node::Num(std::f64::consts::PI)),
            _ => {}
        }
        let unary = match name.as_str() {
            "sin" => Some(UnaryOp::Sin),
            "cos" => Some(UnaryOp::Cos),
            "exp" => Some(UnaryOp::Exp),
            "log" => Some(UnaryOp::Log),
            "abs" => Some(UnaryOp::Abs),
            "sqrt" => Some(UnaryOp::Sqrt),
            _ => None,
        };
        let binary = match name.as_str() {
            "min" => Some(BinOp::Min),
            "max" => Some(BinOp::Max),
            _ => None,
        };
        if unary.is_none() && binary.is_none() {
            return Err(ParseError::UnknownIdent { name, offset });
        }
        self.expect(Tok::LParen, "'(' after function name")?;
        let mut args = vec![self.expr()?];
        while self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            args.push(self.expr()?);
        }
        self.expect(Tok::RParen, "')'")?;
        if let Some(op) = unary {
            if args.len() != 1 {
                return Err(ParseError::Arity {
                    name,
                    expected: 1,
                    found: args.len(),
                    offset,
                });
            }
            Ok(Node::Unary(op, Box::new(args.pop().unwrap())))
        } else {
            let op = binary.unwrap();
            if args.len() != 2 {
                return Err(ParseError::Arity {
                    name,
                    expected: 2,
                    found: args.len(),
                    offset,
                });
            }
            let b = args.pop().unwrap();
            let a = args.pop().unwrap();
            Ok(Node::Binary(op, Box::new(a), Box::new(b)))
        }
    }
}

fn flatten(node: &Node, code: &mut Vec<Instr>) {
    match node {
        Node::Num(v) => code.push(Instr::Push(*v)),
        Node::Var(v) => code.push(Instr::Load(*v)),
        Node::Unary(op, a) => {
            flatten(a, code);
            code.push(Instr::Unary(*op));
        }
        Node::Binary(op, a, b) => {
            flatten(a, code);
            flatten(b, code);
            code.push(Instr::Binary(*op));
        }
    }
}

const STACK_CAP: usize = 64;

impl ExprAst {
    /// Parse `source` into an AST.
    pub fn parse(source: &str) -> Result<Self, ParseError> {
        let toks = tokenize(source)?;
        let mut parser = Parser {
            toks: &toks,
            pos: 0,
            src_len: source.len(),
        };
        let root = parser.expr()?;
        if parser.pos != toks.len() {
            return Err(ParseError::Syntax {
                offset: parser.offset(),
                message: "trailing input".into(),
            });
        }
        Ok(Self::from_root(root, source.to_string()))
    }

    fn from_root(root: Node, source: String) -> Self {
        let mut code = Vec::new();
        flatten(&root, &mut code);
        ExprAst { root, code, source }
    }

    /// A constant expression (used for defaults like `mu = 0`).
    pub fn constant(v: f64) -> Self {
        Self::from_root(Node::Num(v), format!("{v}"))
    }

    /// The text this expression was parsed from.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// Evaluate under `binding`. Domain violations and non-finite results are
    /// reported as errors, never as silent NaNs.
    pub fn eval(&self, binding: &Binding) -> Result<f64, EvalError> {
        // deep expressions fall back to the tree walk
        if self.code.len() > STACK_CAP {
            let v = eval_node(&self.root, binding)?;
            return if v.is_finite() { Ok(v) } else { Err(EvalError::NonFinite) };
        }
        let mut stack = [0.0f64; STACK_CAP];
        let mut top = 0usize;
        for instr in &self.code {
            match *instr {
                Instr::Push(v) => {
                    stack[top] = v;
                    top += 1;
                }
                Instr::Load(var) => {
                    stack[top] = binding.get(var).ok_or(EvalError::Unbound(var))?;
                    top += 1;
                }
                Instr::Unary(op) => {
                    let v = stack[top - 1];
                    stack[top - 1] = match op {
                        UnaryOp::Neg => -v,
                        UnaryOp::Sin => v.sin(),
                        UnaryOp::Cos => v.cos(),
                        UnaryOp::Exp => v.exp(),
                        UnaryOp::Log => {
                            if v <= 0.0 {
                                return Err(EvalError::Domain { op: "log", arg: v });
                            }
                            v.ln()
                        }
                        UnaryOp::Abs => v.abs(),
                        UnaryOp::Sqrt => {
                            if v < 0.0 {
                                return Err(EvalError::Domain { op: "sqrt", arg: v });
                            }
                            v.sqrt()
                        }
                    };
                }
                Instr::Binary(op) => {
                    let r = stack[top - 1];
                    let l = stack[top - 2];
                    top -= 1;
                    stack[top - 1] = match op {
                        BinOp::Add => l + r,
                        BinOp::Sub => l - r,
                        BinOp::Mul => l * r,
                        BinOp::Div => {
                            if r == 0.0 {
                                return Err(EvalError::Domain { op: "div", arg: r });
                            }
                            l / r
                        }
                        BinOp::Pow => pow(l, r)?,
                        BinOp::Min => l.min(r),
                        BinOp::Max => l.max(r),
                    };
                }
            }
        }
        let v = stack[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    /// Does the expression reference `var` anywhere?
    pub fn uses_var(&self, var: Var) -> bool {
        fn walk(n: &Node, var: Var) -> bool {
            match n {
                Node::Num(_) => false,
                Node::Var(v) => *v == var,
                Node::Unary(_, a) => walk(a, var),
                Node::Binary(_, a, b) => walk(a, var) || walk(b, var),
            }
        }
        walk(&self.root, var)
    }

    /// Variables outside `allowed`, in source order (for role validation).
    pub fn disallowed_vars(&self, allowed: &[Var]) -> Vec<Var> {
        let mut bad = Vec::new();
        fn walk(n: &Node, allowed: &[Var], bad: &mut Vec<Var>) {
            match n {
                Node::Num(_) => {}
                Node::Var(v) => {
                    if !allowed.contains(v) && !bad.contains(v) {
                        bad.push(*v);
                    }
                }
                Node::Unary(_, a) => walk(a, allowed, bad),
                Node::Binary(_, a, b) => {
                    walk(a, allowed, bad);
                    walk(b, allowed, bad);
                }
            }
        }
        walk(&self.root, allowed, &mut bad);
        bad
    }
}

impl std::str::FromStr for ExprAst {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExprAst::parse(s)
    }
}

fn eval_node(node: &Node, b: &Binding) -> Result<f64, EvalError> {
    match node {
        Node::Num(v) => Ok(*v),
        Node::Var(var) => b.get(*var).ok_or(EvalError::Unbound(*var)),
        Node::Unary(op, a) => {
            let v = eval_node(a, b)?;
            match op {
                UnaryOp::Neg => Ok(-v),
                UnaryOp::Sin => Ok(v.sin()),
                UnaryOp::Cos => Ok(v.cos()),
                UnaryOp::Exp => Ok(v.exp()),
                UnaryOp::Log => {
                    if v <= 0.0 {
                        Err(EvalError::Domain { op: "log", arg: v })
                    } else {
                        Ok(v.ln())
                    }
                }
                UnaryOp::Abs => Ok(v.abs()),
                UnaryOp::Sqrt => {
                    if v < 0.0 {
                        Err(EvalError::Domain { op: "sqrt", arg: v })
                    } else {
                        Ok(v.sqrt())
                    }
                }
            }
        }
        Node::Binary(op, a, bb) => {
            let l = eval_node(a, b)?;
            let r = eval_node(bb, b)?;
            match op {
                BinOp::Add => Ok(l + r),
                BinOp::Sub => Ok(l - r),
                BinOp::Mul => Ok(l * r),
                BinOp::Div => {
                    if r == 0.0 {
                        Err(EvalError::Domain { op: "div", arg: r })
                    } else {
                        Ok(l / r)
                    }
                }
                BinOp::Pow => pow(l, r),
                BinOp::Min => Ok(l.min(r)),
                BinOp::Max => Ok(l.max(r)),
            }
        }
    }
}

fn pow(base: f64, exp: f64) -> Result<f64, EvalError> {
    if base == 0.0 && exp < 0.0 {
        return Err(EvalError::Domain { op: "pow", arg: exp });
    }
    if base < 0.0 && exp.fract() != 0.0 {
        return Err(EvalError::Domain { op: "pow", arg: base });
    }
    Ok(base.powf(exp))
}

// Canonical printing is fully parenthesized so re-parsing is unambiguous.
impl fmt::Display for ExprAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_node(&self.root, f)
    }
}

fn fmt_node(n: &Node, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match n {
        Node::Num(v) => {
            if *v < 0.0 {
                write!(f, "({v})")
            } else {
                write!(f, "{v}")
            }
        }
        Node::Var(v) => write!(f, "{}", v.name()),
        Node::Unary(UnaryOp::Neg, a) => {
            write!(f, "(-")?;
            fmt_node(a, f)?;
            write!(f, ")")
        }
        Node::Unary(op, a) => {
            write!(f, "{}(", op.name())?;
            fmt_node(a, f)?;
            write!(f, ")")
        }
        Node::Binary(op, a, b) => {
            let infix = match op {
                BinOp::Add => Some("+"),
                BinOp::Sub => Some("-"),
                BinOp::Mul => Some("*"),
                BinOp::Div => Some("/"),
                BinOp::Pow => Some("^"),
                BinOp::Min | BinOp::Max => None,
            };
            if let Some(sym) = infix {
                write!(f, "(")?;
                fmt_node(a, f)?;
                write!(f, " {sym} ")?;
                fmt_node(b, f)?;
                write!(f, ")")
            } else {
                let name = if *op == BinOp::Min { "min" } else { "max" };
                write!(f, "{name}(")?;
                fmt_node(a, f)?;
                write!(f, ", ")?;
                fmt_node(b, f)?;
                write!(f, ")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(src: &str, b: Binding) -> f64 {
        ExprAst::parse(src).unwrap().eval(&b).unwrap()
    }

    #[test]
    fn arithmetic_examples() {
        assert_eq!(ev("2 + 1/(1+t^2)", Binding::new().t(0.0)), 3.0);
        assert_eq!(ev("x*(1-x)", Binding::new().x(0.5)), 0.25);
        assert_eq!(ev("min(3, t)", Binding::new().t(5.0)), 3.0);
        assert_eq!(ev("x^2 + t", Binding::new().x(2.0).t(1.0)), 5.0);
        assert_eq!(ev("pi", Binding::new()), std::f64::consts::PI);
    }

    #[test]
    fn syntax_error_carries_offset() {
        match ExprAst::parse("2 +") {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_identifier() {
        assert!(matches!(
            ExprAst::parse("2 + foo"),
            Err(ParseError::UnknownIdent { .. })
        ));
    }

    #[test]
    fn arity_mismatch() {
        assert!(matches!(
            ExprAst::parse("min(3)"),
            Err(ParseError::Arity { expected: 2, found: 1, .. })
        ));
        assert!(matches!(
            ExprAst::parse("sin(1, 2)"),
            Err(ParseError::Arity { expected: 1, found: 2, .. })
        ));
    }

    #[test]
    fn domain_errors() {
        let log = ExprAst::parse("log(t)").unwrap();
        assert!(matches!(
            log.eval(&Binding::new().t(0.0)),
            Err(EvalError::Domain { op: "log", .. })
        ));
        let div = ExprAst::parse("1/x").unwrap();
        assert!(matches!(
            div.eval(&Binding::new().x(0.0)),
            Err(EvalError::Domain { op: "div", .. })
        ));
        let pw = ExprAst::parse("x^(-1)").unwrap();
        assert!(matches!(
            pw.eval(&Binding::new().x(0.0)),
            Err(EvalError::Domain { op: "pow", .. })
        ));
        let unbound = ExprAst::parse("x + t").unwrap();
        assert!(matches!(
            unbound.eval(&Binding::new().x(1.0)),
            Err(EvalError::Unbound(Var::T))
        ));
    }

    #[test]
    fn precedence_fixed_points() {
        // ^ binds above unary minus, right associative.
        assert_eq!(ev("-2^2", Binding::new()), -4.0);
        assert_eq!(ev("2^-1", Binding::new()), 0.5);
        assert_eq!(ev("2^3^2", Binding::new()), 512.0);
        assert_eq!(ev("2 - 3 - 4", Binding::new()), -5.0);
        assert_eq!(ev("12 / 3 / 2", Binding::new()), 2.0);
        assert_eq!(ev("1 + 2 * 3", Binding::new()), 7.0);
    }

    #[test]
    fn variable_roles() {
        let e = ExprAst::parse("x + t").unwrap();
        assert!(e.uses_var(Var::T));
        assert!(!e.uses_var(Var::Y));
        assert_eq!(e.disallowed_vars(&[Var::X, Var::Y]), vec![Var::T]);
    }

    // ----- reference shunting-yard evaluator (test oracle) -----

    fn shunting_yard(src: &str, b: &Binding) -> Result<f64, ()> {
        #[derive(Clone, Copy, PartialEq)]
        enum Op {
            Add,
            Sub,
            Mul,
            Div,
            Pow,
            Neg,
            Fun(UnaryOp),
            Fun2(BinOp),
            LParen,
        }
        fn prec(op: Op) -> u8 {
            match op {
                Op::Add | Op::Sub => 1,
                Op::Mul | Op::Div => 2,
                Op::Neg => 3,
                Op::Pow => 4,
                _ => 5,
            }
        }
        fn apply(op: Op, vals: &mut Vec<f64>) -> Result<(), ()> {
            match op {
                Op::Neg => {
                    let a = vals.pop().ok_or(())?;
                    vals.push(-a);
                }
                Op::Fun(f) => {
                    let a = vals.pop().ok_or(())?;
                    let v = match f {
                        UnaryOp::Sin => a.sin(),
                        UnaryOp::Cos => a.cos(),
                        UnaryOp::Exp => a.exp(),
                        UnaryOp::Log => {
                            if a <= 0.0 {
                                return Err(());
                            }
                            a.ln()
                        }
                        UnaryOp::Abs => a.abs(),
                        UnaryOp::Sqrt => {
                            if a < 0.0 {
                                return Err(());
                            }
                            a.sqrt()
                        }
                        UnaryOp::Neg => -a,
                    };
                    vals.push(v);
                }
                Op::Fun2(f) => {
                    let r = vals.pop().ok_or(())?;
                    let l = vals.pop().ok_or(())?;
                    vals.push(if f == BinOp::Min { l.min(r) } else { l.max(r) });
                }
                _ => {
                    let r = vals.pop().ok_or(())?;
                    let l = vals.pop().ok_or(())?;
                    let v = match op {
                        Op::Add => l + r,
                        Op::Sub => l - r,
                        Op::Mul => l * r,
                        Op::Div => {
                            if r == 0.0 {
                                return Err(());
                            }
                            l / r
                        }
                        Op::Pow => pow(l, r).map_err(|_| ())?,
                        _ => unreachable!(),
                    };
                    vals.push(v);
                }
            }
            Ok(())
        }

        let toks = tokenize(src).map_err(|_| ())?;
        let mut vals: Vec<f64> = Vec::new();
        let mut ops: Vec<Op> = Vec::new();
        let mut prev_value = false; // previous token completes a value
        for s in &toks {
            match &s.tok {
                Tok::Num(v) => {
                    vals.push(*v);
                    prev_value = true;
                }
                Tok::Ident(name) => match name.as_str() {
                    "x" => {
                        vals.push(b.get(Var::X).ok_or(())?);
                        prev_value = true;
                    }
                    "y" => {
                        vals.push(b.get(Var::Y).ok_or(())?);
                        prev_value = true;
                    }
                    "t" => {
                        vals.push(b.get(Var::T).ok_or(())?);
                        prev_value = true;
                    }
                    "pi" => {
                        vals.push(std::f64::consts::PI);
                        prev_value = true;
                    }
                    "sin" => ops.push(Op::Fun(UnaryOp::Sin)),
                    "cos" => ops.push(Op::Fun(UnaryOp::Cos)),
                    "exp" => ops.push(Op::Fun(UnaryOp::Exp)),
                    "log" => ops.push(Op::Fun(UnaryOp::Log)),
                    "abs" => ops.push(Op::Fun(UnaryOp::Abs)),
                    "sqrt" => ops.push(Op::Fun(UnaryOp::Sqrt)),
                    "min" => ops.push(Op::Fun2(BinOp::Min)),
                    "max" => ops.push(Op::Fun2(BinOp::Max)),
                    _ => return Err(()),
                },
                Tok::LParen => {
                    ops.push(Op::LParen);
                    prev_value = false;
                }
                Tok::RParen => {
                    while let Some(&top) = ops.last() {
                        if top == Op::LParen {
                            break;
                        }
                        apply(ops.pop().unwrap(), &mut vals)?;
                    }
                    if ops.pop() != Some(Op::LParen) {
                        return Err(());
                    }
                    if let Some(Op::Fun(_) | Op::Fun2(_)) = ops.last() {
                        apply(ops.pop().unwrap(), &mut vals)?;
                    }
                    prev_value = true;
                }
                Tok::Comma => {
                    while let Some(&top) = ops.last() {
                        if top == Op::LParen {
                            break;
                        }
                        apply(ops.pop().unwrap(), &mut vals)?;
                    }
                    prev_value = false;
                }
                Tok::Minus if !prev_value => {
                    // prefix operator: push without popping
                    ops.push(Op::Neg);
                }
                Tok::Plus if !prev_value => {}
                op => {
                    let cur = match op {
                        Tok::Plus => Op::Add,
                        Tok::Minus => Op::Sub,
                        Tok::Star => Op::Mul,
                        Tok::Slash => Op::Div,
                        Tok::Caret => Op::Pow,
                        _ => return Err(()),
                    };
                    while let Some(&top) = ops.last() {
                        if matches!(top, Op::LParen | Op::Fun(_) | Op::Fun2(_)) {
                            break;
                        }
                        let right_assoc = cur == Op::Pow;
                        if prec(top) > prec(cur) || (prec(top) == prec(cur) && !right_assoc) {
                            apply(ops.pop().unwrap(), &mut vals)?;
                        } else {
                            break;
                        }
                    }
                    ops.push(cur);
                    prev_value = false;
                }
            }
        }
        while let Some(op) = ops.pop() {
            if op == Op::LParen {
                return Err(());
            }
            apply(op, &mut vals)?;
        }
        if vals.len() == 1 {
            Ok(vals[0])
        } else {
            Err(())
        }
    }

    // Random expression source strings of bounded depth.
    fn arb_expr_src(depth: u32) -> impl Strategy<Value = String> {
        let leaf = prop_oneof![
            (1i32..200).prop_map(|n| format!("{}", n as f64 / 10.0)),
            Just("x".to_string()),
            Just("t".to_string()),
        ];
        leaf.prop_recursive(depth, 64, 3, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone(), prop_oneof![
                    Just("+"), Just("-"), Just("*"), Just("/")
                ])
                    .prop_map(|(a, b, op)| format!("{a} {op} {b}")),
                (inner.clone(), 1u32..4).prop_map(|(a, e)| format!("({a})^{e}")),
                inner.clone().prop_map(|a| format!("-({a})")),
                inner.clone().prop_map(|a| format!("sin({a})")),
                inner.clone().prop_map(|a| format!("abs({a})")),
                (inner.clone(), inner).prop_map(|(a, b)| format!("min({a}, {b})")),
            ]
        })
    }

    proptest! {
        // Evaluation agrees with an independent shunting-yard evaluator.
        #[test]
        fn matches_shunting_yard(src in arb_expr_src(5), x in -3.0f64..3.0, t in -3.0f64..3.0) {
            let b = Binding::new().x(x).t(t);
            let ours = ExprAst::parse(&src).ok().map(|e| e.eval(&b));
            if let Some(Ok(v)) = ours {
                if let Ok(w) = shunting_yard(&src, &b) {
                    let scale = 1.0 + v.abs().max(w.abs());
                    prop_assert!((v - w).abs() <= 1e-15 * scale, "{src}: {v} vs {w}");
                }
            }
        }

        // compiled stack program agrees bitwise with the tree walk
        #[test]
        fn stack_matches_tree(src in arb_expr_src(5), x in -3.0f64..3.0, t in -3.0f64..3.0) {
            if let Ok(ast) = ExprAst::parse(&src) {
                let b = Binding::new().x(x).t(t);
                let tree = eval_node(&ast.root, &b).and_then(|v| {
                    if v.is_finite() { Ok(v) } else { Err(EvalError::NonFinite) }
                });
                match (ast.eval(&b), tree) {
                    (Ok(a), Ok(c)) => prop_assert!(a == c, "{src}: {a} vs {c}"),
                    (Err(_), Err(_)) => {}
                    other => prop_assert!(false, "{src}: {other:?}"),
                }
            }
        }

        // parse ∘ print ∘ parse is an evaluation fixed point (bitwise).
        #[test]
        fn print_reparse_roundtrip(src in arb_expr_src(5), x in -3.0f64..3.0, t in -3.0f64..3.0) {
            if let Ok(ast) = ExprAst::parse(&src) {
                let reparsed = ExprAst::parse(&ast.to_string()).unwrap();
                let b = Binding::new().x(x).t(t);
                match (ast.eval(&b), reparsed.eval(&b)) {
                    (Ok(a), Ok(c)) => prop_assert!(a == c || (a.is_nan() && c.is_nan())),
                    (Err(_), Err(_)) => {}
                    other => prop_assert!(false, "mismatch: {other:?}"),
                }
            }
        }
    }
}

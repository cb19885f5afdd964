//! A small distributional-clause engine.
//!
//! A program is a list of clauses `head(args) ~ dist <- body`, split into
//! static, initial (time 0) and transition (t -> t+1) parts. Each grounding
//! of a clause whose body holds defines one random variable. Worlds are
//! drawn by forward sampling in clause order, and queries are answered as
//! the fraction of sampled worlds satisfying an event.
//!
//! Programs are written as JSON:
//!
//! ```json
//! {"static": [
//!   {"head": "n", "dist": {"tag": "poisson", "params": [6]}},
//!   {"head": "pos", "args": ["P"], "dist": {"tag": "uniform", "params": [0, "N"]},
//!    "body": [{"bind": "N", "rv": "n"}, {"between": [1, "N", "P"]}]}
//! ]}
//! ```
//!
//! Strings starting with an uppercase letter or `_` are logic variables,
//! other strings are symbols, and `{"op": "+", "args": [a, b]}` is arithmetic.

mod dist;
mod engine;
mod event;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dist::{density_at, Distribution};
pub use engine::{query, query_with, sample_world, sample_world_with, Estimate, World};
pub use event::Event;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DcError {
    #[error("unbound variable {var} in clause {clause}")]
    Unbound { clause: String, var: String },
    #[error("invalid program: {0}")]
    InvalidProgram(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("type error in clause {clause}: {reason}")]
    Type { clause: String, reason: String },
    #[error("program json: {0}")]
    Json(String),
    #[error("cannot parse event {0:?}")]
    Event(String),
}

/// Ground argument of a random variable.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Atom {
    Int(i64),
    Sym(String),
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Int(i) => write!(f, "{i}"),
            Atom::Sym(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Real(f64),
    Sym(String),
    Vector(Vec<f64>),
}

impl Value {
    pub fn sym(s: &str) -> Self {
        Value::Sym(s.to_string())
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Real(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            Value::Real(x) if x.fract() == 0.0 && x.is_finite() => Some(*x as i64),
            _ => None,
        }
    }

    pub fn to_atom(&self) -> Option<Atom> {
        match self {
            Value::Sym(s) => Some(Atom::Sym(s.clone())),
            other => other.as_int().map(Atom::Int),
        }
    }

    /// Numeric values compare numerically, symbols by equality.
    pub fn loosely_equals(&self, other: &Value) -> bool {
        match (self.as_f64(), other.as_f64()) {
            (Some(a), Some(b)) => a == b,
            _ => self == other,
        }
    }
}

impl From<Atom> for Value {
    fn from(a: Atom) -> Self {
        match a {
            Atom::Int(i) => Value::Int(i),
            Atom::Sym(s) => Value::Sym(s),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(x) => write!(f, "{x}"),
            Value::Sym(s) => f.write_str(s),
            Value::Vector(v) => write!(f, "{v:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
    #[serde(rename = "/")]
    Div,
}

/// Parameter or argument expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExprRepr", into = "ExprRepr")]
pub enum Expr {
    Int(i64),
    Num(f64),
    Var(String),
    Sym(String),
    List(Vec<Expr>),
    Op(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ExprRepr {
    Int(i64),
    Num(f64),
    Str(String),
    List(Vec<ExprRepr>),
    Op { op: BinOp, args: Vec<ExprRepr> },
}

impl TryFrom<ExprRepr> for Expr {
    type Error = String;
    fn try_from(r: ExprRepr) -> Result<Self, Self::Error> {
        Ok(match r {
            ExprRepr::Int(i) => Expr::Int(i),
            ExprRepr::Num(x) => Expr::Num(x),
            ExprRepr::Str(s) => {
                if s.starts_with(|c: char| c.is_ascii_uppercase() || c == '_') {
                    Expr::Var(s)
                } else {
                    Expr::Sym(s)
                }
            }
            ExprRepr::List(items) => Expr::List(
                items
                    .into_iter()
                    .map(Expr::try_from)
                    .collect::<Result<_, _>>()?,
            ),
            ExprRepr::Op { op, args } => {
                let [a, b]: [ExprRepr; 2] = args
                    .try_into()
                    .map_err(|_| "arithmetic takes exactly two arguments".to_string())?;
                Expr::Op(op, Box::new(a.try_into()?), Box::new(b.try_into()?))
            }
        })
    }
}

impl From<Expr> for ExprRepr {
    fn from(e: Expr) -> Self {
        match e {
            Expr::Int(i) => ExprRepr::Int(i),
            Expr::Num(x) => ExprRepr::Num(x),
            Expr::Var(s) | Expr::Sym(s) => ExprRepr::Str(s),
            Expr::List(items) => ExprRepr::List(items.into_iter().map(Into::into).collect()),
            Expr::Op(op, a, b) => ExprRepr::Op {
                op,
                args: vec![(*a).into(), (*b).into()],
            },
        }
    }
}

impl Expr {
    pub fn var(name: &str) -> Self {
        Expr::Var(name.to_string())
    }
}

/// Time index of a variable referenced in a body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeRef {
    #[serde(rename = "t")]
    Now,
    #[serde(rename = "t+1")]
    Next,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl CmpOp {
    pub fn apply(self, lhs: &Value, rhs: &Value) -> bool {
        if let (Some(a), Some(b)) = (lhs.as_f64(), rhs.as_f64()) {
            return match self {
                CmpOp::Lt => a < b,
                CmpOp::Le => a <= b,
                CmpOp::Gt => a > b,
                CmpOp::Ge => a >= b,
                CmpOp::Eq => a == b,
                CmpOp::Ne => a != b,
            };
        }
        match (self, lhs, rhs) {
            (CmpOp::Eq, a, b) => a == b,
            (CmpOp::Ne, a, b) => a != b,
            (op, Value::Sym(a), Value::Sym(b)) => match op {
                CmpOp::Lt => a < b,
                CmpOp::Le => a <= b,
                CmpOp::Gt => a > b,
                _ => a >= b,
            },
            _ => false,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }
}

/// One body literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Condition {
    /// `Var ~= rv(args)_time`: binds `Var` to the sampled value. Unbound
    /// argument variables enumerate every defined grounding.
    Bind {
        bind: String,
        rv: String,
        #[serde(default)]
        args: Vec<Expr>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        time: Option<TimeRef>,
    },
    /// `between(lo, hi, Var)`: integer range membership; grounds `Var`.
    Between { between: (Expr, Expr, String) },
    Compare { cmp: CmpOp, lhs: Expr, rhs: Expr },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistTag {
    Poisson,
    Uniform,
    Gaussian,
    Finite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistSpec {
    pub tag: DistTag,
    #[serde(default)]
    pub params: Vec<Expr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub head: String,
    #[serde(default)]
    pub args: Vec<Expr>,
    pub dist: DistSpec,
    #[serde(default)]
    pub body: Vec<Condition>,
}

impl Clause {
    pub fn new(head: &str, dist: DistSpec) -> Self {
        Self {
            head: head.to_string(),
            args: Vec::new(),
            dist,
            body: Vec::new(),
        }
    }

    pub fn with_args(mut self, args: Vec<Expr>) -> Self {
        self.args = args;
        self
    }

    pub fn when(mut self, cond: Condition) -> Self {
        self.body.push(cond);
        self
    }

    pub(crate) fn label(&self) -> String {
        if self.args.is_empty() {
            self.head.clone()
        } else {
            format!("{}/{}", self.head, self.args.len())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slice {
    Static,
    Initial,
    Transition,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Program {
    #[serde(rename = "static", default)]
    pub static_clauses: Vec<Clause>,
    #[serde(default)]
    pub initial: Vec<Clause>,
    #[serde(default)]
    pub transition: Vec<Clause>,
}

impl Program {
    pub fn from_json(json: &str) -> Result<Self, DcError> {
        let program: Program = serde_json::from_str(json).map_err(|e| DcError::Json(e.to_string()))?;
        program.validate()?;
        Ok(program)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    /// Checks that every body references only variables defined earlier in
    /// the dependency order, and that time indices fit their slice.
    pub fn validate(&self) -> Result<(), DcError> {
        let statics: BTreeSet<&str> = self.static_clauses.iter().map(|c| c.head.as_str()).collect();
        let initials: BTreeSet<&str> = self.initial.iter().map(|c| c.head.as_str()).collect();
        let transitions: BTreeSet<&str> = self.transition.iter().map(|c| c.head.as_str()).collect();

        let mut seen_static = BTreeSet::new();
        for clause in &self.static_clauses {
            for (rv, time) in clause.references() {
                if time.is_some() {
                    return Err(invalid(clause, format!("static clause references timed variable {rv}")));
                }
                if !seen_static.contains(rv) {
                    return Err(undefined(clause, rv));
                }
            }
            seen_static.insert(clause.head.as_str());
        }

        let mut seen_initial = BTreeSet::new();
        for clause in &self.initial {
            for (rv, time) in clause.references() {
                let ok = match time {
                    None => statics.contains(rv),
                    Some(TimeRef::Now) => seen_initial.contains(rv),
                    Some(TimeRef::Next) => {
                        return Err(invalid(clause, format!("initial clause references {rv} at t+1")))
                    }
                };
                if !ok {
                    return Err(undefined(clause, rv));
                }
            }
            seen_initial.insert(clause.head.as_str());
        }

        let mut seen_next = BTreeSet::new();
        for clause in &self.transition {
            for (rv, time) in clause.references() {
                let ok = match time {
                    None => statics.contains(rv),
                    Some(TimeRef::Now) => initials.contains(rv) || transitions.contains(rv),
                    Some(TimeRef::Next) => seen_next.contains(rv),
                };
                if !ok {
                    return Err(undefined(clause, rv));
                }
            }
            seen_next.insert(clause.head.as_str());
        }
        Ok(())
    }

    pub(crate) fn slices(&self) -> [(Slice, &[Clause]); 3] {
        [
            (Slice::Static, &self.static_clauses),
            (Slice::Initial, &self.initial),
            (Slice::Transition, &self.transition),
        ]
    }
}

impl Clause {
    fn references(&self) -> impl Iterator<Item = (&str, Option<TimeRef>)> {
        self.body.iter().filter_map(|c| match c {
            Condition::Bind { rv, time, .. } => Some((rv.as_str(), *time)),
            _ => None,
        })
    }
}

fn invalid(clause: &Clause, reason: String) -> DcError {
    DcError::InvalidProgram(format!("clause {}: {reason}", clause.label()))
}

fn undefined(clause: &Clause, rv: &str) -> DcError {
    DcError::InvalidProgram(format!(
        "clause {} references {rv} before it is defined",
        clause.label()
    ))
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Bind { bind, rv, args, time } => {
                write!(f, "{bind} ~= {rv}")?;
                if !args.is_empty() {
                    write!(f, "({} args)", args.len())?;
                }
                match time {
                    Some(TimeRef::Now) => write!(f, "_t"),
                    Some(TimeRef::Next) => write!(f, "_t+1"),
                    None => Ok(()),
                }
            }
            Condition::Between { between } => write!(f, "between(.., .., {})", between.2),
            Condition::Compare { cmp, .. } => write!(f, "compare {}", cmp.symbol()),
        }
    }
}

/// The program from the first appendix example: a Poisson number of objects
/// with uniform positions, and a noisy `left/2` relation between them.
pub fn example_objects_program() -> Program {
    Program::from_json(include_str!("../../data/example-objects.json")).expect("bundled program is valid")
}

/// The time-indexed example: positions advance by 3 per step with Gaussian
/// noise of the given variance.
pub fn example_dynamics_program(variance: f64) -> Program {
    let mut program = Program::from_json(include_str!("../../data/example-dynamics.json"))
        .expect("bundled program is valid");
    if let Some(clause) = program.transition.first_mut() {
        clause.dist.params[1] = Expr::Num(variance);
    }
    program
}

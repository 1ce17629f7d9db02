//! Symbolic scalar expressions over the state variables `x0..x{D-1}` and time `t`.
//!
//! Expressions are immutable reference-counted trees. Each node caches a
//! structural hash and its subtree size, so equality checks and ordering of
//! like terms during simplification stay cheap even for the large trees that
//! come out of iterating the generator.
//!
//! ```
//! use tmefs::symexpr::Expr;
//!
//! let e = Expr::parse("tanh(x0)").unwrap();
//! let de = e.diff_state(0).simplify();
//! let v = de.eval(&[0.3], 0.0).unwrap();
//! assert!((v - (1.0 - 0.3f64.tanh().powi(2))).abs() < 1e-15);
//! ```

mod diff;
mod display;
mod matrix;
mod parse;
mod program;
mod simplify;

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops;
use std::sync::Arc;

use thiserror::Error;

pub use matrix::ExprMatrix;
pub use program::Program;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SymError {
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("state variable x{index} out of range for dimension {dim}")]
    VarOutOfRange { index: usize, dim: usize },
    #[error("{reason} in `{expr}`")]
    Domain { reason: &'static str, expr: String },
    #[error("state vector has {got} entries but expression needs x{needed}")]
    Unbound { needed: usize, got: usize },
    #[error("expression budget exceeded at generator iteration {reached}: {nodes} nodes > {budget}")]
    Budget {
        reached: usize,
        nodes: usize,
        budget: usize,
    },
}

/// A variable an expression may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    State(usize),
    Time,
}

/// Supported unary functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Atan,
    Tanh,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Atan => "atan",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "atan" => Func::Atan,
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "log" | "ln" => Func::Log,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    /// Applies the function, reporting domain violations by name.
    pub(crate) fn apply(self, v: f64) -> Result<f64, &'static str> {
        match self {
            Func::Sin => Ok(v.sin()),
            Func::Cos => Ok(v.cos()),
            Func::Tan => Ok(v.tan()),
            Func::Atan => Ok(v.atan()),
            Func::Tanh => Ok(v.tanh()),
            Func::Exp => Ok(v.exp()),
            Func::Log if v > 0.0 => Ok(v.ln()),
            Func::Log => Err("log of non-positive value"),
            Func::Sqrt if v >= 0.0 => Ok(v.sqrt()),
            Func::Sqrt => Err("sqrt of negative value"),
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug)]
pub enum Node {
    Const(f64),
    Var(Var),
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    /// Integer powers only; fractional powers go through `sqrt` or `exp`/`log`.
    Pow(Expr, i32),
    Neg(Expr),
    Div(Expr, Expr),
    Func(Func, Expr),
}

struct Inner {
    node: Node,
    hash: u64,
    size: usize,
}

/// Immutable, cheaply clonable expression handle.
#[derive(Clone)]
pub struct Expr(Arc<Inner>);

fn mix(h: u64, v: u64) -> u64 {
    // splitmix64 finaliser over a running combination
    let mut z = h ^ v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn const_bits(c: f64) -> u64 {
    if c == 0.0 {
        0
    } else {
        c.to_bits()
    }
}

impl Expr {
    fn from_node(node: Node) -> Expr {
        let (hash, size) = match &node {
            Node::Const(c) => (mix(1, const_bits(*c)), 1),
            Node::Var(Var::State(i)) => (mix(2, *i as u64), 1),
            Node::Var(Var::Time) => (mix(3, 0), 1),
            Node::Add(xs) => xs
                .iter()
                .fold((mix(4, xs.len() as u64), 1), |(h, s), e| (mix(h, e.hash()), s + e.size())),
            Node::Mul(xs) => xs
                .iter()
                .fold((mix(5, xs.len() as u64), 1), |(h, s), e| (mix(h, e.hash()), s + e.size())),
            Node::Pow(b, n) => (mix(mix(6, *n as i64 as u64), b.hash()), 1 + b.size()),
            Node::Neg(a) => (mix(7, a.hash()), 1 + a.size()),
            Node::Div(a, b) => (mix(mix(8, a.hash()), b.hash()), 1 + a.size() + b.size()),
            Node::Func(f, a) => (mix(mix(9, f.tag()), a.hash()), 1 + a.size()),
        };
        Expr(Arc::new(Inner { node, hash, size }))
    }

    pub fn node(&self) -> &Node {
        &self.0.node
    }

    /// Number of nodes in the tree (shared subtrees counted every time they occur).
    pub fn size(&self) -> usize {
        self.0.size
    }

    pub(crate) fn hash(&self) -> u64 {
        self.0.hash
    }

    pub fn constant(c: f64) -> Expr {
        Expr::from_node(Node::Const(c))
    }

    pub fn zero() -> Expr {
        Expr::constant(0.0)
    }

    pub fn one() -> Expr {
        Expr::constant(1.0)
    }

    pub fn state(i: usize) -> Expr {
        Expr::from_node(Node::Var(Var::State(i)))
    }

    pub fn time() -> Expr {
        Expr::from_node(Node::Var(Var::Time))
    }

    pub fn var(v: Var) -> Expr {
        Expr::from_node(Node::Var(v))
    }

    pub fn sum(mut terms: Vec<Expr>) -> Expr {
        match terms.len() {
            0 => Expr::zero(),
            1 => terms.pop().unwrap(),
            _ => Expr::from_node(Node::Add(terms)),
        }
    }

    pub fn product(mut factors: Vec<Expr>) -> Expr {
        match factors.len() {
            0 => Expr::one(),
            1 => factors.pop().unwrap(),
            _ => Expr::from_node(Node::Mul(factors)),
        }
    }

    pub fn powi(&self, n: i32) -> Expr {
        match n {
            0 => Expr::one(),
            1 => self.clone(),
            _ => Expr::from_node(Node::Pow(self.clone(), n)),
        }
    }

    pub fn apply(f: Func, arg: Expr) -> Expr {
        Expr::from_node(Node::Func(f, arg))
    }

    pub fn sin(&self) -> Expr {
        Expr::apply(Func::Sin, self.clone())
    }
    pub fn cos(&self) -> Expr {
        Expr::apply(Func::Cos, self.clone())
    }
    pub fn tan(&self) -> Expr {
        Expr::apply(Func::Tan, self.clone())
    }
    pub fn atan(&self) -> Expr {
        Expr::apply(Func::Atan, self.clone())
    }
    pub fn tanh(&self) -> Expr {
        Expr::apply(Func::Tanh, self.clone())
    }
    pub fn exp(&self) -> Expr {
        Expr::apply(Func::Exp, self.clone())
    }
    pub fn ln(&self) -> Expr {
        Expr::apply(Func::Log, self.clone())
    }
    pub fn sqrt(&self) -> Expr {
        Expr::apply(Func::Sqrt, self.clone())
    }

    pub fn as_const(&self) -> Option<f64> {
        match self.node() {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn parse(src: &str) -> Result<Expr, SymError> {
        parse::parse(src, None)
    }

    /// Parses and checks every state index is below `dim`.
    pub fn parse_with_dim(src: &str, dim: usize) -> Result<Expr, SymError> {
        parse::parse(src, Some(dim))
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self.node() {
            Node::Const(_) | Node::Var(_) => {}
            Node::Add(xs) | Node::Mul(xs) => xs.iter().for_each(|x| x.visit(f)),
            Node::Pow(a, _) | Node::Neg(a) | Node::Func(_, a) => a.visit(f),
            Node::Div(a, b) => {
                a.visit(f);
                b.visit(f);
            }
        }
    }

    /// Largest state index referenced, if any.
    pub fn max_state_index(&self) -> Option<usize> {
        let mut best = None;
        self.visit(&mut |e| {
            if let Node::Var(Var::State(i)) = e.node() {
                best = Some(best.map_or(*i, |b: usize| b.max(*i)));
            }
        });
        best
    }

    pub fn references_state(&self) -> bool {
        self.max_state_index().is_some()
    }

    pub fn references_time(&self) -> bool {
        let mut found = false;
        self.visit(&mut |e| found |= matches!(e.node(), Node::Var(Var::Time)));
        found
    }

    /// Checks all state indices are below `dim`.
    pub fn check_dim(&self, dim: usize) -> Result<(), SymError> {
        match self.max_state_index() {
            Some(index) if index >= dim => Err(SymError::VarOutOfRange { index, dim }),
            _ => Ok(()),
        }
    }

    /// Evaluates in double precision. `x` must cover every referenced state index.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<f64, SymError> {
        Ok(match self.node() {
            Node::Const(c) => *c,
            Node::Var(Var::State(i)) => *x.get(*i).ok_or(SymError::Unbound {
                needed: *i,
                got: x.len(),
            })?,
            Node::Var(Var::Time) => t,
            Node::Add(xs) => {
                let mut acc = 0.0;
                for e in xs {
                    acc += e.eval(x, t)?;
                }
                acc
            }
            Node::Mul(xs) => {
                let mut acc = 1.0;
                for e in xs {
                    acc *= e.eval(x, t)?;
                }
                acc
            }
            Node::Pow(b, n) => {
                let v = b.eval(x, t)?;
                if v == 0.0 && *n < 0 {
                    return Err(self.domain("division by zero"));
                }
                v.powi(*n)
            }
            Node::Neg(a) => -a.eval(x, t)?,
            Node::Div(a, b) => {
                let den = b.eval(x, t)?;
                if den == 0.0 {
                    return Err(self.domain("division by zero"));
                }
                a.eval(x, t)? / den
            }
            Node::Func(f, a) => f.apply(a.eval(x, t)?).map_err(|r| self.domain(r))?,
        })
    }

    pub(crate) fn domain(&self, reason: &'static str) -> SymError {
        SymError::Domain {
            reason,
            expr: self.to_string(),
        }
    }

    fn kind_rank(&self) -> u8 {
        match self.node() {
            Node::Const(_) => 0,
            Node::Var(_) => 1,
            Node::Add(_) => 2,
            Node::Mul(_) => 3,
            Node::Pow(..) => 4,
            Node::Neg(_) => 5,
            Node::Div(..) => 6,
            Node::Func(..) => 7,
        }
    }

    fn cmp_structural(&self, other: &Expr) -> Ordering {
        if Arc::ptr_eq(&self.0, &other.0) {
            return Ordering::Equal;
        }
        let by_kind = self.kind_rank().cmp(&other.kind_rank());
        if by_kind != Ordering::Equal {
            return by_kind;
        }
        match (self.node(), other.node()) {
            (Node::Const(a), Node::Const(b)) => const_bits(*a).cmp(&const_bits(*b)),
            (Node::Var(a), Node::Var(b)) => a.cmp(b),
            (Node::Add(a), Node::Add(b)) | (Node::Mul(a), Node::Mul(b)) => a.cmp(b),
            (Node::Pow(a, n), Node::Pow(b, m)) => n.cmp(m).then_with(|| a.cmp(b)),
            (Node::Neg(a), Node::Neg(b)) => a.cmp(b),
            (Node::Div(a, c), Node::Div(b, d)) => a.cmp(b).then_with(|| c.cmp(d)),
            (Node::Func(f, a), Node::Func(g, b)) => f.cmp(g).then_with(|| a.cmp(b)),
            _ => unreachable!("kind ranks matched"),
        }
    }
}

impl PartialEq for Expr {
    fn eq(&self, other: &Expr) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Expr {}

impl PartialOrd for Expr {
    fn partial_cmp(&self, other: &Expr) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Total order: cached hash first, then size, then structure. Equal trees
/// compare `Equal` regardless of sharing.
impl Ord for Expr {
    fn cmp(&self, other: &Expr) -> Ordering {
        self.hash()
            .cmp(&other.hash())
            .then_with(|| self.size().cmp(&other.size()))
            .then_with(|| self.cmp_structural(other))
    }
}

impl Hash for Expr {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.0.hash);
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({self})")
    }
}

impl From<f64> for Expr {
    fn from(c: f64) -> Expr {
        Expr::constant(c)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $build:expr) => {
        impl ops::$trait<Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                $build(self, rhs)
            }
        }
        impl ops::$trait<&Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                $build(self.clone(), rhs.clone())
            }
        }
        impl ops::$trait<f64> for Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                $build(self, Expr::constant(rhs))
            }
        }
        impl ops::$trait<Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                $build(Expr::constant(self), rhs)
            }
        }
    };
}

/// Joins two operands, splicing in the children of a left operand of the same
/// n-ary kind so operator chains build flat trees.
fn chain(a: Expr, b: Expr, is_add: bool) -> Expr {
    let mut items = match (a.node(), is_add) {
        (Node::Add(xs), true) | (Node::Mul(xs), false) => xs.clone(),
        _ => vec![a],
    };
    items.push(b);
    if is_add {
        Expr::sum(items)
    } else {
        Expr::product(items)
    }
}

binop!(Add, add, |a, b| chain(a, b, true));
binop!(Sub, sub, |a, b: Expr| chain(a, -b, true));
binop!(Mul, mul, |a, b| chain(a, b, false));
binop!(Div, div, |a, b| Expr::from_node(Node::Div(a, b)));

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::from_node(Node::Neg(self))
    }
}

impl ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        -self.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structural_equality_ignores_sharing() {
        let a = Expr::state(0).tanh() * Expr::state(1);
        let b = Expr::state(0).tanh() * Expr::state(1);
        assert_eq!(a, b);
        assert_ne!(a, Expr::state(1) * Expr::state(0).tanh());
    }

    #[test]
    fn eval_basics() {
        let x = Expr::state(0);
        assert_eq!(x.tanh().eval(&[0.0], 0.0).unwrap(), 0.0);
        assert_eq!((&x * &x).eval(&[3.0], 0.0).unwrap(), 9.0);
        let v = x.atan().eval(&[1.0f64.tan()], 0.0).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_domain_errors_name_subexpression() {
        let e = Expr::state(0).ln() + Expr::one();
        match e.eval(&[-1.0], 0.0) {
            Err(SymError::Domain { expr, .. }) => assert_eq!(expr, "log(x0)"),
            other => panic!("unexpected {other:?}"),
        }
        let d = Expr::one() / Expr::state(0);
        assert!(matches!(d.eval(&[0.0], 0.0), Err(SymError::Domain { .. })));
        assert!(matches!(
            Expr::state(3).eval(&[1.0], 0.0),
            Err(SymError::Unbound { needed: 3, got: 1 })
        ));
    }

    #[test]
    fn dependency_queries() {
        let e = Expr::parse("x2*sin(t) + 1").unwrap();
        assert_eq!(e.max_state_index(), Some(2));
        assert!(e.references_time());
        assert!(e.check_dim(2).is_err());
        assert!(!Expr::parse("3*4").unwrap().references_state());
    }
}

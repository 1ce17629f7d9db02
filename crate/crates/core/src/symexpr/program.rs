//! Flat instruction tape for evaluating many expressions at once.
//!
//! Common subexpressions across all outputs are shared, so a TME expansion
//! with dozens of coefficient entries evaluates each distinct subtree once
//! per sigma point.

use std::collections::HashMap;

use super::{Expr, Func, Node, SymError, Var};

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    State(usize),
    Time,
    Add(u32, u32),
    Mul(u32, u32),
    Neg(u32),
    Div(u32, u32),
    Powi(u32, i32),
    Func(Func, u32),
}

#[derive(Debug, Clone)]
pub struct Program {
    ops: Vec<Op>,
    /// Source expression for ops that can fail, used in error messages.
    origin: HashMap<u32, Expr>,
    outputs: Vec<u32>,
    n_states: usize,
}

struct Builder {
    ops: Vec<Op>,
    origin: HashMap<u32, Expr>,
    memo: HashMap<Expr, u32>,
}

impl Builder {
    fn push(&mut self, op: Op) -> u32 {
        self.ops.push(op);
        (self.ops.len() - 1) as u32
    }

    fn emit(&mut self, e: &Expr) -> u32 {
        if let Some(&slot) = self.memo.get(e) {
            return slot;
        }
        let slot = match e.node() {
            Node::Const(c) => self.push(Op::Const(*c)),
            Node::Var(Var::State(i)) => self.push(Op::State(*i)),
            Node::Var(Var::Time) => self.push(Op::Time),
            Node::Add(xs) | Node::Mul(xs) => {
                let is_add = matches!(e.node(), Node::Add(_));
                let mut acc = self.emit(&xs[0]);
                for x in &xs[1..] {
                    let rhs = self.emit(x);
                    acc = self.push(if is_add { Op::Add(acc, rhs) } else { Op::Mul(acc, rhs) });
                }
                acc
            }
            Node::Pow(b, n) => {
                let b = self.emit(b);
                let slot = self.push(Op::Powi(b, *n));
                if *n < 0 {
                    self.origin.insert(slot, e.clone());
                }
                slot
            }
            Node::Neg(a) => {
                let a = self.emit(a);
                self.push(Op::Neg(a))
            }
            Node::Div(a, b) => {
                let a = self.emit(a);
                let b = self.emit(b);
                let slot = self.push(Op::Div(a, b));
                self.origin.insert(slot, e.clone());
                slot
            }
            Node::Func(f, a) => {
                let a = self.emit(a);
                let slot = self.push(Op::Func(*f, a));
                if matches!(f, Func::Log | Func::Sqrt) {
                    self.origin.insert(slot, e.clone());
                }
                slot
            }
        };
        self.memo.insert(e.clone(), slot);
        slot
    }
}

impl Program {
    pub fn compile<'a>(exprs: impl IntoIterator<Item = &'a Expr>) -> Program {
        let mut b = Builder {
            ops: Vec::new(),
            origin: HashMap::new(),
            memo: HashMap::new(),
        };
        let outputs: Vec<u32> = exprs.into_iter().map(|e| b.emit(e)).collect();
        let n_states = b
            .ops
            .iter()
            .filter_map(|op| match op {
                Op::State(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        Program {
            ops: b.ops,
            origin: b.origin,
            outputs,
            n_states,
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn n_ops(&self) -> usize {
        self.ops.len()
    }

    /// Evaluates every output into `out`, reusing `scratch` between calls.
    pub fn eval_into(
        &self,
        x: &[f64],
        t: f64,
        scratch: &mut Vec<f64>,
        out: &mut [f64],
    ) -> Result<(), SymError> {
        if x.len() < self.n_states {
            return Err(SymError::Unbound {
                needed: self.n_states - 1,
                got: x.len(),
            });
        }
        assert_eq!(out.len(), self.outputs.len(), "output buffer length");
        scratch.clear();
        scratch.reserve(self.ops.len());
        for (k, op) in self.ops.iter().enumerate() {
            let v = match *op {
                Op::Const(c) => c,
                Op::State(i) => x[i],
                Op::Time => t,
                Op::Add(a, b) => scratch[a as usize] + scratch[b as usize],
                Op::Mul(a, b) => scratch[a as usize] * scratch[b as usize],
                Op::Neg(a) => -scratch[a as usize],
                Op::Div(a, b) => {
                    let den = scratch[b as usize];
                    if den == 0.0 {
                        return Err(self.fail(k, "division by zero"));
                    }
                    scratch[a as usize] / den
                }
                Op::Powi(a, n) => {
                    let base = scratch[a as usize];
                    if n < 0 && base == 0.0 {
                        return Err(self.fail(k, "division by zero"));
                    }
                    base.powi(n)
                }
                Op::Func(f, a) => f.apply(scratch[a as usize]).map_err(|r| self.fail(k, r))?,
            };
            scratch.push(v);
        }
        for (o, slot) in out.iter_mut().zip(&self.outputs) {
            *o = scratch[*slot as usize];
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>, SymError> {
        let mut scratch = Vec::with_capacity(self.ops.len());
        let mut out = vec![0.0; self.outputs.len()];
        self.eval_into(x, t, &mut scratch, &mut out)?;
        Ok(out)
    }

    /// Evaluates every output for `n` states at once. `xs[i]` holds coordinate
    /// `i` of all states; `out` is output-major (`out[o * n + j]`).
    pub fn eval_batch(
        &self,
        xs: &[&[f64]],
        t: f64,
        scratch: &mut Vec<f64>,
        out: &mut [f64],
    ) -> Result<(), SymError> {
        if xs.len() < self.n_states {
            return Err(SymError::Unbound {
                needed: self.n_states - 1,
                got: xs.len(),
            });
        }
        let n = xs.first().map_or(0, |c| c.len());
        assert!(xs.iter().all(|c| c.len() == n), "coordinate slices differ in length");
        assert_eq!(out.len(), self.outputs.len() * n, "output buffer length");
        scratch.clear();
        scratch.resize(self.ops.len() * n, 0.0);
        for (k, op) in self.ops.iter().enumerate() {
            let (done, rest) = scratch.split_at_mut(k * n);
            let dst = &mut rest[..n];
            let src = |a: u32| &done[a as usize * n..(a as usize + 1) * n];
            match *op {
                Op::Const(c) => dst.fill(c),
                Op::State(i) => dst.copy_from_slice(xs[i]),
                Op::Time => dst.fill(t),
                Op::Add(a, b) => {
                    for ((d, x), y) in dst.iter_mut().zip(src(a)).zip(src(b)) {
                        *d = x + y;
                    }
                }
                Op::Mul(a, b) => {
                    for ((d, x), y) in dst.iter_mut().zip(src(a)).zip(src(b)) {
                        *d = x * y;
                    }
                }
                Op::Neg(a) => {
                    for (d, x) in dst.iter_mut().zip(src(a)) {
                        *d = -x;
                    }
                }
                Op::Div(a, b) => {
                    if src(b).contains(&0.0) {
                        return Err(self.fail(k, "division by zero"));
                    }
                    for ((d, x), y) in dst.iter_mut().zip(src(a)).zip(src(b)) {
                        *d = x / y;
                    }
                }
                Op::Powi(a, p) => {
                    if p < 0 && src(a).contains(&0.0) {
                        return Err(self.fail(k, "division by zero"));
                    }
                    match p {
                        2 => {
                            for (d, x) in dst.iter_mut().zip(src(a)) {
                                *d = x * x;
                            }
                        }
                        _ => {
                            for (d, x) in dst.iter_mut().zip(src(a)) {
                                *d = x.powi(p);
                            }
                        }
                    }
                }
                Op::Func(f, a) => {
                    for (d, x) in dst.iter_mut().zip(src(a)) {
                        *d = f.apply(*x).map_err(|r| self.fail(k, r))?;
                    }
                }
            }
        }
        for (o, slot) in self.outputs.iter().enumerate() {
            let s = *slot as usize;
            out[o * n..(o + 1) * n].copy_from_slice(&scratch[s * n..(s + 1) * n]);
        }
        Ok(())
    }

    fn fail(&self, k: usize, reason: &'static str) -> SymError {
        SymError::Domain {
            reason,
            expr: self
                .origin
                .get(&(k as u32))
                .map(|e| e.to_string())
                .unwrap_or_default(),
        }
    }
}

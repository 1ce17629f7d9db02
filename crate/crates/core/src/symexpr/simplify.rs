//! Best-effort canonicalisation.
//!
//! An expression is flattened into a sum of monomials `c * a1^k1 * a2^k2 ...`
//! where the atoms are variables, function applications with simplified
//! arguments, or multi-term sums appearing with a negative exponent. Products
//! of sums are distributed, so identical monomials collect into one
//! coefficient and cancel exactly when they should.

use std::collections::BTreeMap;

use super::{Expr, Node};

type Monomial = Vec<(Expr, i32)>;

/// Terms whose coefficient is below this fraction of the largest coefficient
/// in the same sum are treated as round-off and dropped.
const RELATIVE_DROP: f64 = 1e-14;

/// Refuse to expand `(a + b + ...)^n` beyond this many product terms; the sum
/// stays an atom instead.
const MAX_POWER_TERMS: usize = 4096;

#[derive(Clone, Debug, Default)]
struct Poly {
    terms: BTreeMap<Monomial, f64>,
}

impl Poly {
    fn constant(c: f64) -> Poly {
        let mut p = Poly::default();
        if c != 0.0 {
            p.terms.insert(Vec::new(), c);
        }
        p
    }

    fn atom(e: Expr, k: i32) -> Poly {
        let mut p = Poly::default();
        p.terms.insert(vec![(e, k)], 1.0);
        p
    }

    fn as_const(&self) -> Option<f64> {
        match self.terms.len() {
            0 => Some(0.0),
            1 => self.terms.get(&Vec::new()).copied(),
            _ => None,
        }
    }

    fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        let entry = self.terms.entry(m).or_insert(0.0);
        *entry += c;
    }

    fn add(mut self, other: Poly) -> Poly {
        for (m, c) in other.terms {
            self.add_term(m, c);
        }
        self.prune();
        self
    }

    fn scale(mut self, s: f64) -> Poly {
        if s == 0.0 {
            return Poly::default();
        }
        for c in self.terms.values_mut() {
            *c *= s;
        }
        self
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::default();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.add_term(merge(ma, mb), ca * cb);
            }
        }
        out.prune();
        out
    }

    fn powi(&self, n: i32) -> Poly {
        if n == 0 {
            return Poly::constant(1.0);
        }
        if n < 0 {
            return self.inverse().powi(-n);
        }
        if self.terms.len() == 1 {
            let (m, c) = self.terms.iter().next().unwrap();
            let mut p = Poly::default();
            p.add_term(m.iter().map(|(a, k)| (a.clone(), k * n)).collect(), c.powi(n));
            return p;
        }
        let estimated = (self.terms.len() as f64).powi(n);
        if estimated > MAX_POWER_TERMS as f64 {
            return Poly::atom(self.to_expr(), n);
        }
        let mut acc = self.clone();
        for _ in 1..n {
            acc = acc.mul(self);
        }
        acc
    }

    fn inverse(&self) -> Poly {
        match self.terms.len() {
            // 1/0: keep it symbolic so evaluation reports the domain error
            0 => Poly::atom(Expr::zero(), -1),
            1 => {
                let (m, c) = self.terms.iter().next().unwrap();
                let mut p = Poly::default();
                p.add_term(m.iter().map(|(a, k)| (a.clone(), -k)).collect(), 1.0 / c);
                p
            }
            _ => Poly::atom(self.to_expr(), -1),
        }
    }

    fn prune(&mut self) {
        let max = self.terms.values().fold(0.0f64, |m, c| m.max(c.abs()));
        let cut = max * RELATIVE_DROP;
        self.terms.retain(|_, c| c.abs() > cut && *c != 0.0);
    }

    fn to_expr(&self) -> Expr {
        let terms: Vec<Expr> = self
            .terms
            .iter()
            .map(|(m, c)| {
                let mut factors: Vec<Expr> = Vec::with_capacity(m.len() + 1);
                if *c != 1.0 || m.is_empty() {
                    factors.push(Expr::constant(*c));
                }
                factors.extend(m.iter().map(|(a, k)| a.powi(*k)));
                Expr::product(factors)
            })
            .collect();
        Expr::sum(terms)
    }
}

fn merge(a: &Monomial, b: &Monomial) -> Monomial {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => {
                out.push(a[i].clone());
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j].clone());
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                let k = a[i].1 + b[j].1;
                if k != 0 {
                    out.push((a[i].0.clone(), k));
                }
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

fn to_poly(e: &Expr) -> Poly {
    match e.node() {
        Node::Const(c) => Poly::constant(*c),
        Node::Var(_) => Poly::atom(e.clone(), 1),
        Node::Add(xs) => xs.iter().fold(Poly::default(), |acc, x| acc.add(to_poly(x))),
        Node::Mul(xs) => {
            let mut acc = Poly::constant(1.0);
            for x in xs {
                let p = to_poly(x);
                if p.terms.is_empty() {
                    return Poly::default();
                }
                acc = acc.mul(&p);
            }
            acc
        }
        Node::Pow(b, n) => to_poly(b).powi(*n),
        Node::Neg(a) => to_poly(a).scale(-1.0),
        Node::Div(a, b) => {
            let num = to_poly(a);
            if num.terms.is_empty() {
                return num;
            }
            num.mul(&to_poly(b).inverse())
        }
        Node::Func(f, a) => {
            let arg = to_poly(a);
            if let Some(c) = arg.as_const() {
                if let Ok(v) = f.apply(c) {
                    if v.is_finite() {
                        return Poly::constant(v);
                    }
                }
            }
            Poly::atom(Expr::apply(*f, arg.to_expr()), 1)
        }
    }
}

impl Expr {
    /// Value-preserving canonicalisation (constant folding, 0/1 identities,
    /// flattening, distribution and like-term collection). Idempotent.
    pub fn simplify(&self) -> Expr {
        to_poly(self).to_expr()
    }
}

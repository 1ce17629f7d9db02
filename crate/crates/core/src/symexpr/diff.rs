use super::{Expr, Func, Node, Var};

impl Expr {
    /// Exact partial derivative with respect to `v`. The result is not
    /// simplified; call [`Expr::simplify`] on it.
    pub fn diff(&self, v: Var) -> Expr {
        derivative(self, v).unwrap_or_else(Expr::zero)
    }

    pub fn diff_state(&self, i: usize) -> Expr {
        self.diff(Var::State(i))
    }

    pub fn diff_time(&self) -> Expr {
        self.diff(Var::Time)
    }
}

/// `None` stands for an identically zero derivative so that dead branches are
/// pruned as the tree is built.
fn derivative(e: &Expr, v: Var) -> Option<Expr> {
    match e.node() {
        Node::Const(_) => None,
        Node::Var(w) => (*w == v).then(Expr::one),
        Node::Add(xs) => {
            let terms: Vec<Expr> = xs.iter().filter_map(|x| derivative(x, v)).collect();
            (!terms.is_empty()).then(|| Expr::sum(terms))
        }
        Node::Mul(xs) => {
            let mut terms = Vec::new();
            for (k, x) in xs.iter().enumerate() {
                if let Some(dx) = derivative(x, v) {
                    let mut factors: Vec<Expr> = Vec::with_capacity(xs.len());
                    factors.extend(xs[..k].iter().cloned());
                    factors.push(dx);
                    factors.extend(xs[k + 1..].iter().cloned());
                    terms.push(Expr::product(factors));
                }
            }
            (!terms.is_empty()).then(|| Expr::sum(terms))
        }
        Node::Pow(b, n) => {
            let db = derivative(b, v)?;
            let n = *n;
            Some(Expr::product(vec![Expr::constant(n as f64), b.powi(n - 1), db]))
        }
        Node::Neg(a) => derivative(a, v).map(|d| -d),
        Node::Div(a, b) => {
            let da = derivative(a, v);
            let db = derivative(b, v);
            match (da, db) {
                (None, None) => None,
                (Some(da), None) => Some(da / b.clone()),
                (da, Some(db)) => {
                    // (a'b - a b') / b^2
                    let mut num = Vec::new();
                    if let Some(da) = da {
                        num.push(da * b.clone());
                    }
                    num.push(-(a.clone() * db));
                    Some(Expr::sum(num) / b.powi(2))
                }
            }
        }
        Node::Func(f, a) => {
            let da = derivative(a, v)?;
            let outer = match f {
                Func::Sin => a.cos(),
                Func::Cos => -a.sin(),
                Func::Tan => Expr::one() + e.powi(2),
                Func::Atan => Expr::one() / (Expr::one() + a.powi(2)),
                Func::Tanh => Expr::one() - e.powi(2),
                Func::Exp => e.clone(),
                Func::Log => Expr::one() / a.clone(),
                Func::Sqrt => Expr::constant(0.5) / e.clone(),
            };
            Some(outer * da)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_difference(e: &Expr, x: &[f64], i: usize, h: f64) -> f64 {
        let mut hi = x.to_vec();
        let mut lo = x.to_vec();
        hi[i] += h;
        lo[i] -= h;
        (e.eval(&hi, 0.0).unwrap() - e.eval(&lo, 0.0).unwrap()) / (2.0 * h)
    }

    #[test]
    fn tanh_derivative_is_one_minus_tanh_squared() {
        let x = Expr::state(0);
        let d = x.tanh().diff_state(0).simplify();
        let expected = (Expr::one() - x.tanh().powi(2)).simplify();
        assert_eq!(d, expected);
    }

    #[test]
    fn constant_derivative_is_zero() {
        assert!(Expr::constant(4.2).diff_state(0).simplify().is_zero());
        assert!(Expr::state(1).diff_state(0).simplify().is_zero());
    }

    #[test]
    fn sincos3_drift_matches_finite_difference() {
        // -a^2 sin(x) cos(x)^3 at a = 1.5, x = 1
        let e = Expr::parse("-(1.5^2)*sin(x0)*cos(x0)^3").unwrap();
        let d = e.diff_state(0).simplify();
        let fd = central_difference(&e, &[1.0], 0, 1e-5);
        let exact = d.eval(&[1.0], 0.0).unwrap();
        assert!((exact - fd).abs() < 1e-8, "{exact} vs {fd}");
    }

    #[test]
    fn every_function_matches_finite_difference() {
        let srcs = [
            "sin(x0)*x1",
            "cos(x0^2)",
            "tan(x0)",
            "atan(x0*x1)",
            "tanh(x1)^3",
            "exp(-x0)*x1",
            "log(x0 + 2)",
            "sqrt(x0 + x1^2)",
            "x0/(1 + x1^2)",
            "x0^-2",
        ];
        let x = [0.7, -0.4];
        for src in srcs {
            let e = Expr::parse(src).unwrap();
            for i in 0..2 {
                let d = e.diff_state(i).simplify().eval(&x, 0.0).unwrap();
                let fd = central_difference(&e, &x, i, 1e-5);
                assert!((d - fd).abs() < 1e-7 * (1.0 + fd.abs()), "{src} d/dx{i}: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn time_derivative() {
        let e = Expr::parse("sin(t)*x0").unwrap();
        let d = e.diff_time().simplify();
        let v = d.eval(&[2.0], 0.3).unwrap();
        assert!((v - 2.0 * 0.3f64.cos()).abs() < 1e-15);
    }
}

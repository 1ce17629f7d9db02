use std::fmt;

use super::{Expr, Node, Var};

// Binding strength used to decide where parentheses are needed.
const SUM: u8 = 1;
const PRODUCT: u8 = 2;
const UNARY: u8 = 3;
const POWER: u8 = 4;
const ATOM: u8 = 5;

fn precedence(e: &Expr) -> u8 {
    match e.node() {
        Node::Const(c) if *c < 0.0 => UNARY,
        Node::Const(_) | Node::Var(_) | Node::Func(..) => ATOM,
        Node::Add(_) => SUM,
        Node::Mul(xs) if leading_negative(xs) => UNARY,
        Node::Mul(_) | Node::Div(..) => PRODUCT,
        Node::Neg(_) => UNARY,
        Node::Pow(..) => POWER,
    }
}

fn leading_negative(xs: &[Expr]) -> bool {
    matches!(xs.first().and_then(Expr::as_const), Some(c) if c < 0.0)
}

fn write_prec(f: &mut fmt::Formatter<'_>, e: &Expr, min: u8) -> fmt::Result {
    if precedence(e) < min {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

fn write_const(f: &mut fmt::Formatter<'_>, c: f64) -> fmt::Result {
    // `{:?}` keeps a decimal point or exponent and round-trips exactly.
    write!(f, "{c:?}")
}

/// Writes a product, optionally with the sign of a leading negative constant
/// stripped (the caller has already emitted a minus).
fn write_product(f: &mut fmt::Formatter<'_>, xs: &[Expr], strip_sign: bool) -> fmt::Result {
    let mut first = true;
    let mut rest = xs;
    if strip_sign {
        let c = -xs[0].as_const().unwrap();
        rest = &xs[1..];
        if c != 1.0 || rest.is_empty() {
            write_const(f, c)?;
            first = false;
        }
    }
    for x in rest {
        if !first {
            f.write_str("*")?;
        }
        write_prec(f, x, PRODUCT + 1)?;
        first = false;
    }
    Ok(())
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Const(c) => write_const(f, *c),
            Node::Var(Var::State(i)) => write!(f, "x{i}"),
            Node::Var(Var::Time) => f.write_str("t"),
            Node::Add(xs) => {
                for (k, x) in xs.iter().enumerate() {
                    match x.node() {
                        Node::Const(c) if *c < 0.0 && k > 0 => {
                            f.write_str(" - ")?;
                            write_const(f, -c)?;
                        }
                        Node::Mul(ys) if leading_negative(ys) => {
                            f.write_str(if k > 0 { " - " } else { "-" })?;
                            write_product(f, ys, true)?;
                        }
                        Node::Neg(a) if k > 0 => {
                            f.write_str(" - ")?;
                            write_prec(f, a, PRODUCT)?;
                        }
                        _ => {
                            if k > 0 {
                                f.write_str(" + ")?;
                            }
                            write_prec(f, x, SUM + 1)?;
                        }
                    }
                }
                Ok(())
            }
            Node::Mul(xs) => {
                if leading_negative(xs) {
                    f.write_str("-")?;
                    write_product(f, xs, true)
                } else {
                    write_product(f, xs, false)
                }
            }
            Node::Pow(b, n) => {
                write_prec(f, b, ATOM)?;
                if *n < 0 {
                    write!(f, "^({n})")
                } else {
                    write!(f, "^{n}")
                }
            }
            Node::Neg(a) => {
                f.write_str("-")?;
                write_prec(f, a, POWER)
            }
            Node::Div(a, b) => {
                write_prec(f, a, PRODUCT)?;
                f.write_str("/")?;
                write_prec(f, b, PRODUCT + 1)
            }
            Node::Func(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Expr;

    #[test]
    fn prints_readably() {
        let e = Expr::parse("2*x0*tanh(x0) + 1").unwrap();
        assert_eq!(e.to_string(), "2.0*x0*tanh(x0) + 1.0");
        assert_eq!(Expr::parse("x0^-2").unwrap().to_string(), "x0^(-2)");
    }

    #[test]
    fn printed_form_reparses_to_the_same_value() {
        for src in [
            "-(x0 - 2)^3/(1 + x1^2)",
            "-1.5^2*sin(x0)*cos(x0)^3",
            "x0 - -3*x1",
            "exp(-x0/2) - t*x1^(-1)",
            "1e-5*x0 + 2.5e3",
        ] {
            let e = Expr::parse(src).unwrap();
            for candidate in [e.clone(), e.simplify()] {
                let back = Expr::parse(&candidate.to_string()).unwrap();
                let x = [0.3, -0.7];
                let (a, b) = (candidate.eval(&x, 0.4).unwrap(), back.eval(&x, 0.4).unwrap());
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{src}: {candidate} -> {a} vs {b}");
            }
        }
    }
}

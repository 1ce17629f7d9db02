use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use tmefs::analysis::{self, Verdict};
use tmefs::model::SdeModel;
use tmefs::quadrature::SigmaRule;
use tmefs::symexpr::{Expr, ExprMatrix};
use tmefs::tme;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Small expressions in `x0, x1` built from smooth, everywhere-defined pieces.
fn arb_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-2.0f64..2.0).prop_map(Expr::constant),
        Just(Expr::state(0)),
        Just(Expr::state(1)),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a + b),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a * b),
            inner.clone().prop_map(|a| a.sin()),
            inner.clone().prop_map(|a| a.tanh()),
            inner.clone().prop_map(|a| a.atan()),
            (inner, 0i32..4).prop_map(|(a, n)| a.powi(n)),
        ]
    })
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derivative_is_linear(f in arb_expr(), g in arb_expr(), a in -3.0f64..3.0, x in point()) {
        let lhs = (Expr::constant(a) * f.clone() + g.clone()).diff_state(0).eval(&x, 0.0).unwrap();
        let rhs = a * f.diff_state(0).eval(&x, 0.0).unwrap() + g.diff_state(0).eval(&x, 0.0).unwrap();
        prop_assert!(close(lhs, rhs, 1e-10), "{lhs} vs {rhs}");
    }

    #[test]
    fn mixed_partials_commute(f in arb_expr(), x in point()) {
        let a = f.diff_state(0).diff_state(1).eval(&x, 0.0).unwrap();
        let b = f.diff_state(1).diff_state(0).eval(&x, 0.0).unwrap();
        prop_assert!(close(a, b, 1e-9), "{a} vs {b}");
    }

    #[test]
    fn simplify_preserves_value(f in arb_expr(), x in point()) {
        let a = f.eval(&x, 0.0).unwrap();
        let b = f.simplify().eval(&x, 0.0).unwrap();
        prop_assert!(close(a, b, 1e-12), "{a} vs {b}");
    }

    #[test]
    fn derivative_matches_finite_difference(f in arb_expr(), x in point()) {
        let h = 1e-5;
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[0] += h;
        xm[0] -= h;
        let fd = (f.eval(&xp, 0.0).unwrap() - f.eval(&xm, 0.0).unwrap()) / (2.0 * h);
        let d = f.diff_state(0).eval(&x, 0.0).unwrap();
        prop_assert!((fd - d).abs() <= 1e-4 * (1.0 + d.abs()), "{fd} vs {d}");
    }

    #[test]
    fn generator_is_linear(f in arb_expr(), g in arb_expr(), a in -3.0f64..3.0, x in point()) {
        let model = SdeModel::parse(&["x1", "-sin(x0) - 0.3*x1"], &[&["0.2"], &["x0"]], DMatrix::identity(1, 1)).unwrap();
        let lhs = model.generator(&(Expr::constant(a) * f.clone() + g.clone())).eval(&x, 0.0).unwrap();
        let rhs = a * model.generator(&f).eval(&x, 0.0).unwrap() + model.generator(&g).eval(&x, 0.0).unwrap();
        prop_assert!(close(lhs, rhs, 1e-9), "{lhs} vs {rhs}");
    }

    #[test]
    fn linear_generator_powers(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        x in point(),
        l in 0.1f64..2.0,
    ) {
        let am = DMatrix::from_row_slice(2, 2, &a);
        let drift: Vec<Expr> = (0..2)
            .map(|i| Expr::constant(am[(i, 0)]) * Expr::state(0) + Expr::constant(am[(i, 1)]) * Expr::state(1))
            .collect();
        let model = SdeModel::new(drift, ExprMatrix::from_numeric(&DMatrix::from_row_slice(2, 1, &[0.0, l])), DMatrix::identity(1, 1)).unwrap();
        let xv = DVector::from_column_slice(&x);
        let mut ar = xv.clone();
        for r in 1..=4 {
            ar = &am * ar;
            for i in 0..2 {
                let got = model.generator_power(&Expr::state(i), r).unwrap().eval(&x, 0.0).unwrap();
                prop_assert!(close(got, ar[i], 1e-10), "r = {r}: {got} vs {}", ar[i]);
            }
        }
    }

    #[test]
    fn tme_of_linear_model_is_taylor_of_matrix_exponential(
        a in -1.5f64..1.5,
        x in -2.0f64..2.0,
        dt in 0.0f64..0.5,
        order in 1usize..5,
    ) {
        let model = SdeModel::new(
            vec![Expr::constant(a) * Expr::state(0)],
            ExprMatrix::column(vec![Expr::constant(1.0)]),
            DMatrix::identity(1, 1),
        ).unwrap();
        let e = tme::expand(&model, order).unwrap();
        let (m, p) = e.mean_cov(&[x], 0.0, dt).unwrap();
        let mut fact = 1.0;
        let mut mean = x;
        let mut var = 0.0;
        for r in 1..=order {
            fact *= r as f64;
            mean += a.powi(r as i32) * dt.powi(r as i32) / fact * x;
            var += (2.0 * a).powi(r as i32 - 1) * dt.powi(r as i32) / fact;
        }
        prop_assert!(close(m[0], mean, 1e-12));
        prop_assert!(close(p[(0, 0)], var, 1e-12));
    }

    #[test]
    fn quadrature_is_exact_for_affine_maps(
        m in prop::collection::vec(-2.0f64..2.0, 3),
        l in prop::collection::vec(-1.0f64..1.0, 9),
        b in prop::collection::vec(-1.0f64..1.0, 9),
    ) {
        let mean = DVector::from_column_slice(&m);
        let lm = DMatrix::from_row_slice(3, 3, &l);
        let cov = &lm * lm.transpose() + DMatrix::identity(3, 3) * 0.1;
        let bm = DMatrix::from_row_slice(3, 3, &b);
        for rule in [
            SigmaRule::gauss_hermite(3, 3).unwrap(),
            SigmaRule::cubature(3).unwrap(),
            SigmaRule::unscented_default(3).unwrap(),
        ] {
            let em = rule.gauss_expect(&mean, &cov, |x| Ok(&bm * x)).unwrap();
            let want = &bm * &mean;
            let ec = rule.gauss_expect_matrix(&mean, &cov, |x| {
                let d = &bm * (x - &mean);
                Ok(&d * d.transpose())
            }).unwrap();
            let want_c = &bm * &cov * bm.transpose();
            prop_assert!((em - want).amax() < 1e-10);
            prop_assert!((ec - want_c).amax() < 1e-9);
        }
    }

    #[test]
    fn quadrature_is_rotation_invariant(
        theta in 0.0f64..std::f64::consts::TAU,
        m in prop::collection::vec(-1.0f64..1.0, 2),
        k in 0usize..4,
    ) {
        // E g(x) for x ~ N(m, P) equals E g(Rz) for z ~ N(Rᵀm, RᵀPR) when the rule is exact for g.
        let (s, c) = theta.sin_cos();
        let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let p = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.7]);
        let mean = DVector::from_column_slice(&m);
        let rule = match k {
            0 => SigmaRule::gauss_hermite(2, 3).unwrap(),
            1 => SigmaRule::gauss_hermite(2, 5).unwrap(),
            2 => SigmaRule::cubature(2).unwrap(),
            _ => SigmaRule::unscented_default(2).unwrap(),
        };
        let g = |x: &DVector<f64>| DVector::from_element(1, (x[0] + 2.0 * x[1]).powi(3) + x[0] * x[1] - x[1]);
        let direct = rule.gauss_expect(&mean, &p, |x| Ok(g(x))).unwrap();
        let rotated = rule
            .gauss_expect(&(r.transpose() * &mean), &(r.transpose() * &p * &r), |z| Ok(g(&(&r * z))))
            .unwrap();
        prop_assert!((direct[0] - rotated[0]).abs() < 1e-9 * (1.0 + direct[0].abs()));
    }

    #[test]
    fn certificate_is_sound(x in -3.0f64..3.0, order in 2usize..5, dt in 1e-3f64..20.0) {
        let model = SdeModel::parse(&["tanh(x0) - 0.1*x0"], &[&["0.7"]], DMatrix::identity(1, 1)).unwrap();
        let cert = analysis::certify_pd(&model, order, &[x], (0.0, 20.0), 200).unwrap();
        if cert.verdict == Verdict::CertifiedPd {
            let (_, p) = tme::expand(&model, order).unwrap().mean_cov(&[x], 0.0, dt).unwrap();
            prop_assert!(p[(0, 0)] > 0.0, "certified but Σ({dt}) = {}", p[(0, 0)]);
        }
    }
}

#[test]
fn certificate_is_one_sided() {
    // dx0 = 2 dW0, dx1 = −x0 dt + dW1: Σ₂ is p.d. at Δt = 0.75 (Cholesky
    // succeeds) although the min-eigenvalue polynomial is already negative.
    let model = SdeModel::parse(&["0", "-x0"], &[&["2", "0"], &["0", "1"]], DMatrix::identity(2, 2)).unwrap();
    let (_, p) = tme::expand(&model, 2).unwrap().mean_cov(&[0.3, -0.2], 0.0, 0.75).unwrap();
    assert!(p.clone().cholesky().is_some(), "{p}");
    let cert = analysis::certify_pd(&model, 2, &[0.3, -0.2], (0.0, 0.75), 100).unwrap();
    assert_eq!(cert.verdict, Verdict::NotCertified);
    assert!(cert.lower_bound(0.75) <= 0.0);
}

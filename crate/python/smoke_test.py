"""Smoke test for the tmefs Python bindings.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`.
"""

import math

import tmefs_py as t


def check_expr():
    e = t.Expr("sin(x0) * x1")
    assert abs(e.eval([0.5, 2.0]) - 2.0 * math.sin(0.5)) < 1e-14
    assert abs(e.diff(0).eval([0.5, 2.0]) - 2.0 * math.cos(0.5)) < 1e-14


def check_tme():
    model = t.SdeModel.tanh()
    mean, cov = model.tme_moments(2, [0.5], 1.0)
    assert abs(mean[0] - 0.9621171572600098) < 1e-12
    assert cov[0][0] > 0.0
    coeffs, _ = model.tme_coefficients(2)
    assert coeffs[1][0] == "tanh(x0)"
    # A linear model reproduces the exact OU mean as the order grows.
    ou = t.SdeModel.ou(1.0, 1.0)
    m4, _ = ou.tme_moments(8, [1.0], 0.5)
    assert abs(m4[0] - math.exp(-0.5)) < 1e-6


def check_certificate():
    cert = t.certify_pd(t.SdeModel.tanh(), 3, [0.5])
    assert cert.certified and cert.witness is None
    bad = t.certify_pd(t.SdeModel.ou(), 2, [0.0], dt_max=3.0)
    assert not bad.certified and bad.witness is not None


def check_quadrature():
    rule = t.SigmaRule.gauss_hermite(2, 3)
    assert len(rule) == 9
    m = rule.expect([1.0, -1.0], [[2.0, 0.3], [0.3, 1.0]], lambda x: [x[0] ** 2, x[0] * x[1]])
    assert abs(m[0] - 3.0) < 1e-12
    assert abs(m[1] - (0.3 - 1.0)) < 1e-12


def check_filter():
    model = t.SdeModel(["x1", "-9.81*sin(x0)"], [["0"], ["0.5"]])
    ys = [[0.8 * math.sin(0.3 * k)] for k in range(40)]
    run = t.filter_smooth(model, ["sin(x0)"], [[0.1]], ys, [1.0, 0.0], [[0.1, 0.0], [0.0, 0.1]], 0.05)
    assert not run.diverged
    assert len(run.filter_means) == 40
    assert len(run.smoother_means) == 41
    for c in run.smoother_covs:
        assert c[0][0] > 0.0 and c[1][1] > 0.0
    lin = t.filter_smooth(model, [[1.0, 0.0]], [[0.1]], ys, [1.0, 0.0], [[0.1, 0.0], [0.0, 0.1]], 0.05, method="ito15")
    assert not lin.diverged


if __name__ == "__main__":
    check_expr()
    check_tme()
    check_certificate()
    check_quadrature()
    check_filter()
    print("python smoke test passed")

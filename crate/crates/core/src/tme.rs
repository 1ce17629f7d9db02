//! Taylor moment expansion of the transition mean, second moment and
//! covariance.
//!
//! For order `M` the estimates are polynomials in `Δt` whose coefficients are
//! symbolic functions of the state:
//!
//! ```text
//! a_M(x, Δt) = Σ_{r=0..M} 𝒜ʳx Δtʳ / r!
//! B_M(x, Δt) = Σ_{r=0..M} 𝒜ʳ(xxᵀ) Δtʳ / r!
//! Σ_M(x, Δt) = Σ_{r=1..M} Φ_r Δtʳ / r!,   Φ_r = 𝒜ʳ(xxᵀ) − Σ_s C(r,s) 𝒜ˢx (𝒜ʳ⁻ˢx)ᵀ
//! ```
//!
//! The covariance is assembled from the `Φ_r` coefficients rather than as
//! `B_M − a_M a_Mᵀ`; the latter would carry spurious powers of `Δt` above `M`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::SdeModel;
use crate::symexpr::{Expr, ExprMatrix, Program, SymError};

pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// Matrix-coefficient polynomial in `Δt`. `coeffs[r]` already includes the
/// `1/r!` factor.
#[derive(Debug, Clone)]
pub struct TmePolynomial {
    coeffs: Vec<ExprMatrix>,
}

impl TmePolynomial {
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff(&self, r: usize) -> &ExprMatrix {
        &self.coeffs[r]
    }

    pub fn coeffs(&self) -> &[ExprMatrix] {
        &self.coeffs
    }

    /// Evaluates coefficient matrices at `x` and sums them by Horner's rule.
    pub fn eval(&self, x: &[f64], t: f64, dt: f64) -> Result<DMatrix<f64>, SymError> {
        let mut acc = self.coeffs.last().unwrap().eval(x, t)?;
        for c in self.coeffs.iter().rev().skip(1) {
            acc = acc * dt + c.eval(x, t)?;
        }
        Ok(acc)
    }
}

/// Numeric transition moments at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub second_moment: DMatrix<f64>,
}

/// Symbolic order-`M` expansion plus compiled tapes for evaluation.
#[derive(Debug, Clone)]
pub struct TmeExpansion {
    order: usize,
    dim: usize,
    mean: TmePolynomial,
    second_moment: TmePolynomial,
    covariance: TmePolynomial,
    mean_cov_program: Program,
    second_program: Program,
}

/// `α[u][r] = 𝒜ʳ x_u` for `r = 0..=order`.
fn mean_iterates(model: &SdeModel, order: usize) -> Result<Vec<Vec<Expr>>, SymError> {
    (0..model.dim())
        .map(|u| model.generator_powers(&Expr::state(u), order))
        .collect()
}

/// `Φ_r` from the definition, given the mean and second-moment iterates.
fn phi_from_iterates(alpha: &[Vec<Expr>], beta_uv: &Expr, u: usize, v: usize, r: usize) -> Expr {
    let mut terms = vec![beta_uv.clone()];
    for s in 0..=r {
        terms.push(Expr::product(vec![
            Expr::constant(-binomial(r, s)),
            alpha[u][s].clone(),
            alpha[v][r - s].clone(),
        ]));
    }
    Expr::sum(terms).simplify()
}

impl TmeExpansion {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `a_M` as a D×1 polynomial.
    pub fn mean(&self) -> &TmePolynomial {
        &self.mean
    }

    pub fn second_moment(&self) -> &TmePolynomial {
        &self.second_moment
    }

    /// `Σ_M`; `coeff(0)` is identically zero.
    pub fn covariance(&self) -> &TmePolynomial {
        &self.covariance
    }

    /// Mean and covariance only (what the filter needs), with the covariance
    /// symmetrised.
    pub fn mean_cov(&self, x: &[f64], t: f64, dt: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_dt(dt)?;
        let d = self.dim;
        let vals = self.mean_cov_program.eval(x, t)?;
        let per_order = d + d * d;
        let mut mean = DVector::zeros(d);
        let mut cov = DMatrix::zeros(d, d);
        for r in (0..=self.order).rev() {
            let block = &vals[r * per_order..(r + 1) * per_order];
            mean = mean * dt + DVector::from_column_slice(&block[..d]);
            cov = cov * dt + DMatrix::from_row_slice(d, d, &block[d..]);
        }
        linalg::symmetrize(&mut cov);
        Ok((mean, cov))
    }

    /// `(a_M, Σ_M, B_M)` at state `x`, time `t` and step `dt`.
    pub fn evaluate_moments(&self, x: &[f64], t: f64, dt: f64) -> Result<TransitionMoments> {
        let (mean, cov) = self.mean_cov(x, t, dt)?;
        let d = self.dim;
        let vals = self.second_program.eval(x, t)?;
        let mut second = DMatrix::zeros(d, d);
        for r in (0..=self.order).rev() {
            second = second * dt + DMatrix::from_row_slice(d, d, &vals[r * d * d..(r + 1) * d * d]);
        }
        Ok(TransitionMoments {
            mean,
            cov,
            second_moment: second,
        })
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt.is_finite() && dt >= 0.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("time step must be finite and non-negative, got {dt}")))
    }
}

/// Builds the order-`order` TME of `model`.
pub fn expand(model: &SdeModel, order: usize) -> Result<TmeExpansion> {
    if order == 0 {
        return Err(Error::Config("TME order must be at least 1".into()));
    }
    let d = model.dim();
    let alpha = mean_iterates(model, order)?;
    let mut mean_coeffs = Vec::with_capacity(order + 1);
    let mut second_coeffs = vec![ExprMatrix::zeros(d, d); order + 1];
    let mut cov_coeffs = vec![ExprMatrix::zeros(d, d); order + 1];
    for r in 0..=order {
        let scale = 1.0 / factorial(r);
        mean_coeffs.push(ExprMatrix::column(
            (0..d).map(|u| (scale * alpha[u][r].clone()).simplify()).collect(),
        ));
    }
    for u in 0..d {
        for v in u..d {
            let beta = model.generator_powers(&(Expr::state(u) * Expr::state(v)), order)?;
            for r in 0..=order {
                let scale = 1.0 / factorial(r);
                let b = (scale * beta[r].clone()).simplify();
                second_coeffs[r].set(u, v, b.clone());
                second_coeffs[r].set(v, u, b);
                if r > 0 {
                    let phi = phi_from_iterates(&alpha, &beta[r], u, v, r);
                    let c = (scale * phi).simplify();
                    cov_coeffs[r].set(u, v, c.clone());
                    cov_coeffs[r].set(v, u, c);
                }
            }
        }
    }
    let mean_cov_program = Program::compile(
        (0..=order).flat_map(|r| mean_coeffs[r].entries().iter().chain(cov_coeffs[r].entries())),
    );
    let second_program = Program::compile(second_coeffs.iter().flat_map(|c| c.entries()));
    Ok(TmeExpansion {
        order,
        dim: d,
        mean: TmePolynomial { coeffs: mean_coeffs },
        second_moment: TmePolynomial {
            coeffs: second_coeffs,
        },
        covariance: TmePolynomial { coeffs: cov_coeffs },
        mean_cov_program,
        second_program,
    })
}

/// `Φ_r = 𝒜ʳ(xxᵀ) − Σ_{s=0..r} C(r,s) 𝒜ˢx (𝒜ʳ⁻ˢx)ᵀ`, symbolic and symmetric.
pub fn phi_direct(model: &SdeModel, r: usize) -> Result<ExprMatrix> {
    let d = model.dim();
    if r == 0 {
        return Ok(ExprMatrix::zeros(d, d));
    }
    let alpha = mean_iterates(model, r)?;
    let mut phi = ExprMatrix::zeros(d, d);
    for u in 0..d {
        for v in u..d {
            let beta = model.generator_power(&(Expr::state(u) * Expr::state(v)), r)?;
            let e = phi_from_iterates(&alpha, &beta, u, v, r);
            phi.set(v, u, e.clone());
            phi.set(u, v, e);
        }
    }
    Ok(phi)
}

/// `Φ_r` by the recursion
/// `Φ_r^{uv} = Σᵢⱼ Σ_{s<r} C(r−1,s) ∂ᵢ𝒜ˢx_u ∂ⱼ𝒜^{r−s−1}x_v Γᵢⱼ + 𝒜Φ_{r−1}^{uv}`
/// from `Φ_0 = 0`. Requires a time-homogeneous model with constant dispersion.
pub fn phi_recursive(model: &SdeModel, r: usize) -> Result<ExprMatrix> {
    if !model.is_time_homogeneous() || !model.has_constant_dispersion() {
        return Err(Error::Config(
            "the Φ recursion needs a time-homogeneous drift and constant dispersion".into(),
        ));
    }
    let d = model.dim();
    let mut phi = ExprMatrix::zeros(d, d);
    if r == 0 {
        return Ok(phi);
    }
    let alpha = mean_iterates(model, r - 1)?;
    // grad[u][s][i] = ∂ᵢ 𝒜ˢ x_u
    let grad: Vec<Vec<Vec<Expr>>> = alpha
        .iter()
        .map(|iterates| {
            iterates
                .iter()
                .map(|a| (0..d).map(|i| a.diff_state(i).simplify()).collect())
                .collect()
        })
        .collect();
    let gamma = model.gamma();
    for k in 1..=r {
        let mut next = ExprMatrix::zeros(d, d);
        for u in 0..d {
            for v in u..d {
                let mut terms = vec![model.generator(phi.get(u, v))];
                for s in 0..k {
                    let c = binomial(k - 1, s);
                    for i in 0..d {
                        let gu = &grad[u][s][i];
                        if gu.is_zero() {
                            continue;
                        }
                        for j in 0..d {
                            let gv = &grad[v][k - s - 1][j];
                            let gij = gamma.get(i, j);
                            if gv.is_zero() || gij.is_zero() {
                                continue;
                            }
                            terms.push(Expr::product(vec![
                                Expr::constant(c),
                                gu.clone(),
                                gv.clone(),
                                gij.clone(),
                            ]));
                        }
                    }
                }
                let e = Expr::sum(terms).simplify();
                if e.size() > model.node_budget() {
                    return Err(SymError::Budget {
                        reached: k,
                        nodes: e.size(),
                        budget: model.node_budget(),
                    }
                    .into());
                }
                next.set(v, u, e.clone());
                next.set(u, v, e);
            }
        }
        phi = next;
    }
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tanh_model() -> SdeModel {
        SdeModel::parse(&["tanh(x0)"], &[&["1"]], DMatrix::identity(1, 1)).unwrap()
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol * b.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn tanh_second_order_is_closed_form() {
        let exp = expand(&tanh_model(), 2).unwrap();
        for &x in &[-1.3, 0.0, 0.5, 2.0] {
            for &dt in &[0.1, 1.0, 5.0] {
                let m = exp.evaluate_moments(&[x], 0.0, dt).unwrap();
                assert_close(m.mean[0], x + x.tanh() * dt, 1e-14);
                assert_close(m.cov[(0, 0)], dt + (1.0 - x.tanh().powi(2)) * dt * dt, 1e-14);
            }
        }
        let m = exp.evaluate_moments(&[0.5], 0.0, 1.0).unwrap();
        assert_close(m.mean[0], 0.962_117_157_260_009_8, 1e-12);
        assert_close(m.cov[(0, 0)], 1.786_447_732_965_927, 1e-12);
    }

    #[test]
    fn base_point_at_zero_step() {
        let model = SdeModel::parse(
            &["x1", "-sin(x0) - 0.1*x1"],
            &[&["0"], &["0.5"]],
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let exp = expand(&model, 3).unwrap();
        let x = [0.3, -0.2];
        let m = exp.evaluate_moments(&x, 0.0, 0.0).unwrap();
        assert_eq!(m.mean.as_slice(), &x);
        assert_eq!(m.cov, DMatrix::zeros(2, 2));
        assert!((m.second_moment[(0, 1)] - x[0] * x[1]).abs() < 1e-15);
        let small = exp.evaluate_moments(&x, 0.0, 1e-9).unwrap();
        assert!(small.cov.amax() < 1e-9);
        assert!(exp.evaluate_moments(&x, 0.0, -1.0).is_err());
    }

    #[test]
    fn first_order_covariance_is_gamma_dt() {
        let model = SdeModel::parse(
            &["x1*x0", "cos(x0)"],
            &[&["1 + x1^2", "0"], &["x0", "2"]],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
        )
        .unwrap();
        let exp = expand(&model, 1).unwrap();
        let x = [0.4, 0.9];
        let m = exp.evaluate_moments(&x, 0.0, 0.3).unwrap();
        let expected = model.gamma_at(&x, 0.0).unwrap() * 0.3;
        assert!((m.cov - expected).amax() < 1e-14);
    }

    #[test]
    fn ou_third_order_mean() {
        let model = SdeModel::parse(&["-x0"], &[&["1"]], DMatrix::identity(1, 1)).unwrap();
        let exp = expand(&model, 3).unwrap();
        let m = exp.evaluate_moments(&[2.0], 0.0, 0.1).unwrap();
        let expected = 2.0 * (1.0 - 0.1 + 0.005 - 0.1f64.powi(3) / 6.0);
        assert_close(m.mean[0], expected, 1e-15);
    }

    #[test]
    fn phi_zero_and_symmetry() {
        let model = SdeModel::parse(
            &["x1", "-x0^3 + sin(x1)"],
            &[&["0"], &["1"]],
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let phi0 = phi_direct(&model, 0).unwrap();
        assert!(phi0.entries().iter().all(Expr::is_zero));
        let exp = expand(&model, 3).unwrap();
        assert!(exp.covariance().coeff(0).entries().iter().all(Expr::is_zero));
        let phi3 = phi_direct(&model, 3).unwrap().eval(&[0.7, -0.4], 0.0).unwrap();
        assert_eq!(phi3[(0, 1)], phi3[(1, 0)]);
    }

    #[test]
    fn recursion_requires_constant_dispersion() {
        let model = SdeModel::parse(&["0"], &[&["cos(x0)"]], DMatrix::identity(1, 1)).unwrap();
        assert!(matches!(phi_recursive(&model, 2), Err(Error::Config(_))));
        assert!(phi_direct(&model, 2).is_ok());
    }

    #[test]
    fn tanh_phi_recursive_vanishes_from_three() {
        let m = tanh_model();
        for r in 3..=4 {
            let phi = phi_recursive(&m, r).unwrap();
            for x in [-2.0, 0.1, 0.5, 3.0] {
                assert!(phi.get(0, 0).eval(&[x], 0.0).unwrap().abs() < 1e-13);
            }
        }
    }

    #[test]
    fn order_zero_rejected() {
        assert!(matches!(expand(&tanh_model(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(4, 2), 6.0);
        assert_eq!(binomial(5, 0), 1.0);
        assert_eq!(factorial(5), 120.0);
    }
}

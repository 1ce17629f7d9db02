//! Built-in benchmark models.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::model::{MeasModel, SdeModel};
use crate::symexpr::Expr;

/// `dx = tanh(x) dt + dW`.
pub fn tanh_model() -> SdeModel {
    SdeModel::parse(&["tanh(x0)"], &[&["1"]], DMatrix::identity(1, 1)).expect("built-in model")
}

/// `dx = −a² sin(x) cos³(x) dt + a cos²(x) dW`, whose solution is
/// `x_t = atan(a W_t + tan x₀)`.
pub fn sincos3_model(a: f64) -> Result<SdeModel> {
    let a2 = Expr::constant(a * a);
    let x = Expr::state(0);
    let drift = -(a2 * x.sin() * x.cos().powi(3));
    let disp = Expr::constant(a) * x.cos().powi(2);
    SdeModel::new(vec![drift], crate::symexpr::ExprMatrix::column(vec![disp]), DMatrix::identity(1, 1))
}

/// `dx = −θ x dt + σ dW`.
pub fn ou_model(theta: f64, sigma: f64) -> Result<SdeModel> {
    let drift = Expr::constant(-theta) * Expr::state(0);
    SdeModel::new(
        vec![drift],
        crate::symexpr::ExprMatrix::column(vec![Expr::constant(sigma)]),
        DMatrix::identity(1, 1),
    )
}

/// Parameters of the 3-D coordinated-turn tracking scenario. Angles and the
/// turn rate are in radians; the defaults convert the degree values.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordTurnParams {
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma_r: f64,
    pub sigma_theta: f64,
    pub sigma_phi: f64,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl Default for CoordTurnParams {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        let m0 = DVector::from_vec(vec![1000.0, 0.0, 2650.0, 150.0, 200.0, 10.0, 30.0 * deg]);
        let mut p0 = DMatrix::from_diagonal_element(7, 7, 100.0 * 100.0);
        p0[(6, 6)] = (10.0 * deg).powi(2);
        CoordTurnParams {
            sigma1: 0.2f64.sqrt(),
            sigma2: 7e-3,
            sigma_r: 50.0,
            sigma_theta: 0.1 * deg,
            sigma_phi: 0.1 * deg,
            m0,
            p0,
        }
    }
}

/// State `[p_x, v_x, p_y, v_y, p_z, v_z, θ]`, drift
/// `[v_x, −θv_y, v_y, θv_x, v_z, 0, 0]`, `L = diag(0, σ₁, 0, σ₁, 0, σ₁, σ₂)`, `Q = I`.
pub fn coord_turn_model(p: &CoordTurnParams) -> Result<SdeModel> {
    let drift = ["x1", "-x6*x3", "x3", "x6*x1", "x5", "0", "0"];
    let diag = [0.0, p.sigma1, 0.0, p.sigma1, 0.0, p.sigma1, p.sigma2];
    let l: Vec<Vec<String>> = (0..7)
        .map(|i| (0..7).map(|j| if i == j { format!("{:?}", diag[i]) } else { "0".into() }).collect())
        .collect();
    let l_refs: Vec<Vec<&str>> = l.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
    let l_slices: Vec<&[&str]> = l_refs.iter().map(Vec::as_slice).collect();
    SdeModel::parse(&drift, &l_slices, DMatrix::identity(7, 7))
}

/// Range, azimuth `atan(p_y/p_x)` and elevation `atan(p_z/√(p_x²+p_y²))`.
pub fn coord_turn_measurement(p: &CoordTurnParams) -> Result<MeasModel> {
    let h = [
        "sqrt(x0^2 + x2^2 + x4^2)",
        "atan(x2/x0)",
        "atan(x4/sqrt(x0^2 + x2^2))",
    ]
    .iter()
    .map(|s| Expr::parse_with_dim(s, 7))
    .collect::<Result<Vec<_>, _>>()?;
    let v = DMatrix::from_diagonal(&DVector::from_vec(vec![
        p.sigma_r.powi(2),
        p.sigma_theta.powi(2),
        p.sigma_phi.powi(2),
    ]));
    MeasModel::nonlinear(7, h, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinated_turn_shapes() {
        let p = CoordTurnParams::default();
        let m = coord_turn_model(&p).unwrap();
        assert_eq!(m.dim(), 7);
        assert!(m.has_constant_dispersion());
        let g = m.gamma_at(&[0.0; 7], 0.0).unwrap();
        assert!((g[(1, 1)] - 0.2).abs() < 1e-15);
        assert!((g[(6, 6)] - 4.9e-5).abs() < 1e-18);
        let h = coord_turn_measurement(&p).unwrap();
        let z = h.observe(&p.m0).unwrap();
        let r = (1000f64.powi(2) + 2650f64.powi(2) + 200f64.powi(2)).sqrt();
        assert!((z[0] - r).abs() < 1e-9);
        assert!((z[1] - 2.65f64.atan()).abs() < 1e-12);
        assert!((p.m0[6] - std::f64::consts::PI / 6.0).abs() < 1e-15);
    }

    #[test]
    fn sincos3_drift() {
        let m = sincos3_model(1.5).unwrap();
        let f = m.drift_at(&[1.0], 0.0).unwrap()[0];
        assert!((f + 2.25 * 1f64.sin() * 1f64.cos().powi(3)).abs() < 1e-14);
        assert!(!m.has_constant_dispersion());
    }
}

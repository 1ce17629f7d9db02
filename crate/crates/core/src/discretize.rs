//! Transition-moment providers: TME, Euler–Maruyama, Itô-1.5, scalar
//! Milstein, and the moment ODEs closed by linearisation or by quadrature.
//!
//! Discretization providers give `(E[x_{t+Δt} | x], Cov[x_{t+Δt} | x])` at a
//! single state and are integrated over the prior by the filter. ODE-flow
//! providers map a whole Gaussian `(m, P)` forward directly.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::SdeModel;
use crate::quadrature::{QuadratureKind, SigmaRule};
use crate::symexpr::{Expr, Program};
use crate::tme::{self, TmeExpansion};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderMode {
    /// Moments at a single state; the filter integrates them over the prior.
    Discretization,
    /// Maps `(m, P)` to the predicted Gaussian directly.
    OdeFlow,
}

/// Result of propagating a Gaussian through an ODE flow.
#[derive(Debug, Clone)]
pub struct FlowOutput {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `Cov(x_start, x_end)`.
    pub cross: DMatrix<f64>,
}

pub trait MomentProvider: Send + Sync {
    fn name(&self) -> String;

    fn dim(&self) -> usize;

    fn mode(&self) -> ProviderMode;

    /// Conditional mean and covariance of `x_{t+dt}` given `x_t = x`.
    fn transition(&self, x: &DVector<f64>, t: f64, dt: f64) -> Result<(DVector<f64>, DMatrix<f64>)>;

    fn cond_mean(&self, x: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>> {
        Ok(self.transition(x, t, dt)?.0)
    }

    fn cond_cov(&self, x: &DVector<f64>, t: f64, dt: f64) -> Result<DMatrix<f64>> {
        Ok(self.transition(x, t, dt)?.1)
    }

    /// Propagates `N(m, P)` over `dt` using `steps` internal steps. Only
    /// ODE-flow providers implement this.
    fn flow(&self, _m: &DVector<f64>, _p: &DMatrix<f64>, _t: f64, _dt: f64, _steps: usize) -> Result<FlowOutput> {
        Err(Error::Unsupported {
            method: self.name(),
            reason: "not an ODE-flow provider".into(),
        })
    }
}

fn check_step(x: &DVector<f64>, dim: usize, dt: f64) -> Result<()> {
    if x.len() != dim {
        return Err(Error::Dimension(format!("state has length {}, model dimension is {dim}", x.len())));
    }
    if !(dt.is_finite() && dt >= 0.0) {
        return Err(Error::Input(format!("time step must be finite and non-negative, got {dt}")));
    }
    Ok(())
}

fn vec_of(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}

fn mat_of(d: usize, values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, values)
}

/// Tape evaluating `f` followed by the row-major entries of `Γ`.
fn drift_gamma_program(model: &SdeModel) -> Program {
    Program::compile(model.drift().iter().chain(model.gamma().entries()))
}

pub struct TmeProvider {
    expansion: TmeExpansion,
}

impl TmeProvider {
    pub fn new(model: &SdeModel, order: usize) -> Result<Self> {
        Ok(TmeProvider {
            expansion: tme::expand(model, order)?,
        })
    }

    pub fn expansion(&self) -> &TmeExpansion {
        &self.expansion
    }
}

impl MomentProvider for TmeProvider {
    fn name(&self) -> String {
        format!("tme{}", self.expansion.order())
    }

    fn dim(&self) -> usize {
        self.expansion.dim()
    }

    fn mode(&self) -> ProviderMode {
        ProviderMode::Discretization
    }

    fn transition(&self, x: &DVector<f64>, t: f64, dt: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_step(x, self.dim(), dt)?;
        self.expansion.mean_cov(x.as_slice(), t, dt)
    }
}

/// `E ≈ x + f(x)Δt`, `Cov ≈ Γ(x)Δt`.
pub struct EulerMaruyama {
    dim: usize,
    program: Program,
}

impl EulerMaruyama {
    pub fn new(model: &SdeModel) -> Self {
        EulerMaruyama {
            dim: model.dim(),
            program: drift_gamma_program(model),
        }
    }
}

impl MomentProvider for EulerMaruyama {
    fn name(&self) -> String {
        "em".into()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn mode(&self) -> ProviderMode {
        ProviderMode::Discretization
    }

    fn transition(&self, x: &DVector<f64>, t: f64, dt: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_step(x, self.dim, dt)?;
        let d = self.dim;
        let v = self.program.eval(x.as_slice(), t)?;
        let mean = x + vec_of(&v[..d]) * dt;
        let mut cov = mat_of(d, &v[d..]) * dt;
        linalg::symmetrize(&mut cov);
        Ok((mean, cov))
    }
}

/// Strong order 1.5 Itô–Taylor step for state-independent dispersion:
///
/// ```text
/// x' = x + fΔt + ½(𝒜f)Δt² + LΔW + (∇f L)ΔZ
/// ```
///
/// with `E[ΔWΔWᵀ] = QΔt`, `E[ΔZΔWᵀ] = ½QΔt²`, `E[ΔZΔZᵀ] = ⅓QΔt³`. The
/// covariance is written as `A Q Aᵀ + C Q Cᵀ` so it is PSD by construction.
pub struct Ito15 {
    dim: usize,
    noise_dim: usize,
    diffusion: DMatrix<f64>,
    /// `f`, `𝒜f`, row-major `∇f`, row-major `L`.
    program: Program,
}

impl Ito15 {
    pub fn new(model: &SdeModel) -> Result<Self> {
        if !model.has_constant_dispersion() {
            return Err(Error::Unsupported {
                method: "ito15".into(),
                reason: "Itô-1.5 needs a dispersion that does not depend on the state".into(),
            });
        }
        let d = model.dim();
        let gen_f: Vec<Expr> = model.drift().iter().map(|f| model.generator(f)).collect();
        let jac = model.drift_jacobian();
        let program = Program::compile(
            model
                .drift()
                .iter()
                .chain(&gen_f)
                .chain(jac.entries())
                .chain(model.dispersion().entries()),
        );
        Ok(Ito15 {
            dim: d,
            noise_dim: model.noise_dim(),
            diffusion: model.diffusion().clone(),
            program,
        })
    }
}

impl MomentProvider for Ito15 {
    fn name(&self) -> String {
        "ito15".into()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn mode(&self) -> ProviderMode {
        ProviderMode::Discretization
    }

    fn transition(&self, x: &DVector<f64>, t: f64, dt: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_step(x, self.dim, dt)?;
        let (d, s) = (self.dim, self.noise_dim);
        let v = self.program.eval(x.as_slice(), t)?;
        let f = vec_of(&v[..d]);
        let gen_f = vec_of(&v[d..2 * d]);
        let jac = mat_of(d, &v[2 * d..2 * d + d * d]);
        let l = DMatrix::from_row_slice(d, s, &v[2 * d + d * d..]);
        let mean = x + f * dt + gen_f * (0.5 * dt * dt);
        let g = &jac * &l;
        let h3 = dt.powf(1.5);
        let a = &l * dt.sqrt() + &g * (0.5 * h3);
        let c = &g * (h3 / 12f64.sqrt());
        let mut cov = &a * &self.diffusion * a.transpose() + &c * &self.diffusion * c.transpose();
        linalg::symmetrize(&mut cov);
        Ok((mean, cov))
    }
}

/// Moments of the scalar Milstein step
/// `x' = x + fΔt + LΔW + ½LL′(ΔW² − QΔt)`:
/// mean `x + fΔt`, variance `L²QΔt + ½(LL′Q)²Δt²`.
pub struct Milstein {
    /// `f`, `L`, `∂L/∂x`.
    program: Program,
    q: f64,
}

impl Milstein {
    pub fn new(model: &SdeModel) -> Result<Self> {
        if model.dim() != 1 || model.noise_dim() != 1 {
            return Err(Error::Unsupported {
                method: "milstein".into(),
                reason: format!(
                    "scalar Milstein needs a 1-D state and 1-D noise, got {}-D state and {}-D noise",
                    model.dim(),
                    model.noise_dim()
                ),
            });
        }
        let l = model.dispersion().get(0, 0).clone();
        let dl = l.diff_state(0).simplify();
        let program = Program::compile([&model.drift()[0], &l, &dl]);
        Ok(Milstein {
            program,
            q: model.diffusion()[(0, 0)],
        })
    }
}

impl MomentProvider for Milstein {
    fn name(&self) -> String {
        "milstein".into()
    }

    fn dim(&self) -> usize {
        1
    }

    fn mode(&self) -> ProviderMode {
        ProviderMode::Discretization
    }

    fn transition(&self, x: &DVector<f64>, t: f64, dt: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_step(x, 1, dt)?;
        let v = self.program.eval(x.as_slice(), t)?;
        let (f, l, dl) = (v[0], v[1], v[2]);
        let mean = DVector::from_element(1, x[0] + f * dt);
        let k = l * dl * self.q;
        let var = l * l * self.q * dt + 0.5 * k * k * dt * dt;
        Ok((mean, DMatrix::from_element(1, 1, var)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeVariant {
    Linear,
    Gauss,
}

/// RK4 integration of the mean/covariance ODEs
///
/// ```text
/// ṁ = E[f],  Ṗ = E[(x−m)fᵀ] + E[f(x−m)ᵀ] + E[Γ],  Ċ = C P⁻¹ E[(x−m)fᵀ]
/// ```
///
/// where `C = Cov(x_start, x_t)`. The linear variant replaces the expectations
/// by a first-order expansion about `m`, giving `E[(x−m)fᵀ] = P Fᵀ`.
pub struct MomentOde {
    variant: OdeVariant,
    dim: usize,
    /// `f`, row-major `Γ`, and for the linear variant row-major `∇f`.
    program: Program,
    rule: Option<SigmaRule>,
}

#[derive(Clone)]
struct OdeState {
    m: DVector<f64>,
    p: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl OdeState {
    fn axpy(&self, h: f64, k: &OdeState) -> OdeState {
        let mut p = &self.p + &k.p * h;
        linalg::symmetrize(&mut p);
        OdeState {
            m: &self.m + &k.m * h,
            p,
            c: &self.c + &k.c * h,
        }
    }
}

impl MomentOde {
    pub fn linear(model: &SdeModel) -> Self {
        let jac = model.drift_jacobian();
        MomentOde {
            variant: OdeVariant::Linear,
            dim: model.dim(),
            program: Program::compile(model.drift().iter().chain(model.gamma().entries()).chain(jac.entries())),
            rule: None,
        }
    }

    pub fn gauss(model: &SdeModel, rule: SigmaRule) -> Result<Self> {
        if rule.dim() != model.dim() {
            return Err(Error::Dimension(format!(
                "sigma rule is {}-D, model is {}-D",
                rule.dim(),
                model.dim()
            )));
        }
        Ok(MomentOde {
            variant: OdeVariant::Gauss,
            dim: model.dim(),
            program: drift_gamma_program(model),
            rule: Some(rule),
        })
    }

    pub fn variant(&self) -> OdeVariant {
        self.variant
    }

    fn derivative(&self, s: &OdeState, t: f64) -> Result<OdeState> {
        let d = self.dim;
        let (ef, a, eg) = match self.variant {
            OdeVariant::Linear => {
                let v = self.program.eval(s.m.as_slice(), t)?;
                let f = vec_of(&v[..d]);
                let gamma = mat_of(d, &v[d..d + d * d]);
                let jac = mat_of(d, &v[d + d * d..]);
                (f, &s.p * jac.transpose(), gamma)
            }
            OdeVariant::Gauss => {
                let rule = self.rule.as_ref().expect("gauss variant has a rule");
                let points = rule.sigma_points(&s.m, &s.p)?;
                let mut ef = DVector::zeros(d);
                let mut a = DMatrix::zeros(d, d);
                let mut eg = DMatrix::zeros(d, d);
                let mut scratch = Vec::new();
                let mut buf = vec![0.0; d + d * d];
                for (x, w) in points.iter().zip(rule.weights()) {
                    self.program.eval_into(x.as_slice(), t, &mut scratch, &mut buf)?;
                    let f = vec_of(&buf[..d]);
                    a += (x - &s.m) * f.transpose() * *w;
                    ef += f * *w;
                    eg += mat_of(d, &buf[d..]) * *w;
                }
                (ef, a, eg)
            }
        };
        let mut dp = &a + a.transpose() + eg;
        linalg::symmetrize(&mut dp);
        let dc = if s.c.iter().all(|v| *v == 0.0) {
            DMatrix::zeros(d, d)
        } else {
            match self.variant {
                // C P⁻¹ (P Fᵀ) = C Fᵀ, written without the solve.
                OdeVariant::Linear => {
                    let v = self.program.eval(s.m.as_slice(), t)?;
                    &s.c * mat_of(d, &v[d + d * d..]).transpose()
                }
                OdeVariant::Gauss => {
                    let l = linalg::cholesky_or_err(&s.p, "moment ODE covariance")?;
                    &s.c * linalg::chol_solve(&l, &a)
                }
            }
        };
        let out = OdeState { m: ef, p: dp, c: dc };
        if !out.m.iter().chain(out.p.iter()).chain(out.c.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("moment ODE derivative".into()));
        }
        Ok(out)
    }
}

impl MomentProvider for MomentOde {
    fn name(&self) -> String {
        match self.variant {
            OdeVariant::Linear => "linode".into(),
            OdeVariant::Gauss => "gaussode".into(),
        }
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn mode(&self) -> ProviderMode {
        ProviderMode::OdeFlow
    }

    /// Flow of a point mass with a single RK4 step.
    fn transition(&self, x: &DVector<f64>, t: f64, dt: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let out = self.flow(x, &DMatrix::zeros(self.dim, self.dim), t, dt, 1)?;
        Ok((out.mean, out.cov))
    }

    fn flow(&self, m: &DVector<f64>, p: &DMatrix<f64>, t: f64, dt: f64, steps: usize) -> Result<FlowOutput> {
        check_step(m, self.dim, dt)?;
        if p.nrows() != self.dim || p.ncols() != self.dim {
            return Err(Error::Dimension(format!("covariance must be {0}x{0}", self.dim)));
        }
        if steps == 0 {
            return Err(Error::Config("ODE flow needs at least one step".into()));
        }
        let h = dt / steps as f64;
        let mut s = OdeState {
            m: m.clone(),
            p: linalg::symmetrized(p),
            c: linalg::symmetrized(p),
        };
        for k in 0..steps {
            let tk = t + k as f64 * h;
            let k1 = self.derivative(&s, tk)?;
            let k2 = self.derivative(&s.axpy(0.5 * h, &k1), tk + 0.5 * h)?;
            let k3 = self.derivative(&s.axpy(0.5 * h, &k2), tk + 0.5 * h)?;
            let k4 = self.derivative(&s.axpy(h, &k3), tk + h)?;
            let w = h / 6.0;
            s.m += (&k1.m + &k2.m * 2.0 + &k3.m * 2.0 + &k4.m) * w;
            s.p += (&k1.p + &k2.p * 2.0 + &k3.p * 2.0 + &k4.p) * w;
            s.c += (&k1.c + &k2.c * 2.0 + &k3.c * 2.0 + &k4.c) * w;
            linalg::symmetrize(&mut s.p);
        }
        Ok(FlowOutput {
            mean: s.m,
            cov: s.p,
            cross: s.c,
        })
    }
}

/// Method names accepted by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Tme(usize),
    Em,
    Ito15,
    Milstein,
    LinOde,
    GaussOde,
}

impl Method {
    /// Builds the provider. `quad` selects the sigma rule of the Gauss-ODE
    /// closure and is ignored otherwise.
    pub fn build(self, model: &SdeModel, quad: QuadratureKind) -> Result<Box<dyn MomentProvider>> {
        Ok(match self {
            Method::Tme(order) => Box::new(TmeProvider::new(model, order)?),
            Method::Em => Box::new(EulerMaruyama::new(model)),
            Method::Ito15 => Box::new(Ito15::new(model)?),
            Method::Milstein => Box::new(Milstein::new(model)?),
            Method::LinOde => Box::new(MomentOde::linear(model)),
            Method::GaussOde => Box::new(MomentOde::gauss(model, quad.build(model.dim())?)?),
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if let Some(order) = s.strip_prefix("tme") {
            return match order.parse::<usize>() {
                Ok(m) if m >= 1 => Ok(Method::Tme(m)),
                _ => Err(Error::Config(format!("bad TME order in '{s}'"))),
            };
        }
        match s.as_str() {
            "em" => Ok(Method::Em),
            "ito15" => Ok(Method::Ito15),
            "milstein" => Ok(Method::Milstein),
            "linode" => Ok(Method::LinOde),
            "gaussode" => Ok(Method::GaussOde),
            _ => Err(Error::Config(format!(
                "unknown method '{s}' (expected tme<M>, em, ito15, milstein, linode or gaussode)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Tme(m) => write!(f, "tme{m}"),
            Method::Em => f.write_str("em"),
            Method::Ito15 => f.write_str("ito15"),
            Method::Milstein => f.write_str("milstein"),
            Method::LinOde => f.write_str("linode"),
            Method::GaussOde => f.write_str("gaussode"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tanh_model() -> SdeModel {
        SdeModel::parse(&["tanh(x0)"], &[&["1"]], DMatrix::identity(1, 1)).unwrap()
    }

    fn ou_model() -> SdeModel {
        SdeModel::parse(&["-x0"], &[&["1"]], DMatrix::identity(1, 1)).unwrap()
    }

    fn model24(a: f64) -> SdeModel {
        let drift = format!("-{} * sin(x0) * cos(x0)^3", a * a);
        let disp = format!("{a} * cos(x0)^2");
        SdeModel::parse(&[drift.as_str()], &[&[disp.as_str()]], DMatrix::identity(1, 1)).unwrap()
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn em_tanh_step() {
        let em = EulerMaruyama::new(&tanh_model());
        let (m, p) = em.transition(&v1(0.5), 0.0, 0.1).unwrap();
        assert!((m[0] - (0.5 + 0.1 * 0.5f64.tanh())).abs() < 1e-15);
        assert!((p[(0, 0)] - 0.1).abs() < 1e-15);
        let tme1 = TmeProvider::new(&tanh_model(), 1).unwrap();
        let (m1, p1) = tme1.transition(&v1(0.5), 0.0, 0.1).unwrap();
        assert!((m1[0] - m[0]).abs() < 1e-15 && (p1[(0, 0)] - p[(0, 0)]).abs() < 1e-15);
    }

    #[test]
    fn ito15_mean_on_linear_and_tanh() {
        let ito = Ito15::new(&ou_model()).unwrap();
        let dt = 0.3;
        let (m, p) = ito.transition(&v1(2.0), 0.0, dt).unwrap();
        assert!((m[0] - 2.0 * (1.0 - dt + dt * dt / 2.0)).abs() < 1e-14);
        // dt - dt² + dt³/3 for dx = -x dt + dW
        assert!((p[(0, 0)] - (dt - dt * dt + dt.powi(3) / 3.0)).abs() < 1e-14);

        let ito = Ito15::new(&tanh_model()).unwrap();
        let tme2 = TmeProvider::new(&tanh_model(), 2).unwrap();
        for x in [-1.0, 0.2, 0.5, 3.0] {
            let a = ito.cond_mean(&v1(x), 0.0, 0.7).unwrap();
            let b = tme2.cond_mean(&v1(x), 0.0, 0.7).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn ito15_rejects_state_dependent_dispersion() {
        assert!(matches!(Ito15::new(&model24(1.5)), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn milstein_extra_variance() {
        let a = 1.5;
        let model = model24(a);
        let mil = Milstein::new(&model).unwrap();
        let em = EulerMaruyama::new(&model);
        let x = 1.0f64;
        let dt = 0.05;
        let l = a * x.cos().powi(2);
        let dl = -2.0 * a * x.cos() * x.sin();
        let (m1, p1) = mil.transition(&v1(x), 0.0, dt).unwrap();
        let (m2, p2) = em.transition(&v1(x), 0.0, dt).unwrap();
        assert_eq!(m1, m2);
        let extra = 0.5 * (l * dl).powi(2) * dt * dt;
        assert!((p1[(0, 0)] - p2[(0, 0)] - extra).abs() < 1e-14);

        let mil_ou = Milstein::new(&ou_model()).unwrap();
        let em_ou = EulerMaruyama::new(&ou_model());
        assert_eq!(
            mil_ou.transition(&v1(0.3), 0.0, 0.2).unwrap(),
            em_ou.transition(&v1(0.3), 0.0, 0.2).unwrap()
        );
    }

    #[test]
    fn milstein_rejects_vector_models() {
        let m = SdeModel::parse(&["x1", "-x0"], &[&["0"], &["1"]], DMatrix::identity(1, 1)).unwrap();
        assert!(matches!(Milstein::new(&m), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn zero_step_limits() {
        let model = tanh_model();
        let providers: Vec<Box<dyn MomentProvider>> = vec![
            Box::new(TmeProvider::new(&model, 3).unwrap()),
            Box::new(EulerMaruyama::new(&model)),
            Box::new(Ito15::new(&model).unwrap()),
            Box::new(Milstein::new(&model).unwrap()),
            Box::new(MomentOde::linear(&model)),
        ];
        for p in &providers {
            let (m, c) = p.transition(&v1(0.4), 0.0, 0.0).unwrap();
            assert_eq!(m[0], 0.4, "{}", p.name());
            assert_eq!(c[(0, 0)], 0.0, "{}", p.name());
        }
    }

    #[test]
    fn driftless_flow_adds_gamma_dt() {
        let model = SdeModel::parse(&["0", "0"], &[&["1", "0"], &["0", "2"]], DMatrix::identity(2, 2)).unwrap();
        let p0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let m0 = DVector::from_vec(vec![1.0, -1.0]);
        for provider in [
            MomentOde::linear(&model),
            MomentOde::gauss(&model, SigmaRule::cubature(2).unwrap()).unwrap(),
        ] {
            let out = provider.flow(&m0, &p0, 0.0, 0.5, 3).unwrap();
            assert_eq!(out.mean, m0);
            let expected = &p0 + DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
            assert!((&out.cov - expected).amax() < 1e-14);
            assert!((&out.cross - &p0).amax() < 1e-14);
        }
    }

    #[test]
    fn linear_flow_matches_closed_form() {
        // dx = A x dt + L dW with A = [[0, 1], [-1, -0.5]], L = [0, 1]ᵀ
        let model = SdeModel::parse(&["x1", "-x0 - 0.5*x1"], &[&["0"], &["1"]], DMatrix::identity(1, 1)).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5]);
        let gamma = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let m0 = DVector::from_vec(vec![1.0, 0.5]);
        let p0 = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]);
        let dt = 0.8;
        // Reference: matrix exponential plus a midpoint sum of the Lyapunov integral.
        let expm = |t: f64| (a.clone() * t).exp();
        let phi = expm(dt);
        let n = 20_000;
        let h = dt / n as f64;
        let mut q = DMatrix::zeros(2, 2);
        for i in 0..n {
            let s = (i as f64 + 0.5) * h;
            let e = expm(dt - s);
            q += &e * &gamma * e.transpose() * h;
        }
        let p_exact = &phi * &p0 * phi.transpose() + q;
        let m_exact = &phi * &m0;
        for provider in [
            MomentOde::linear(&model),
            MomentOde::gauss(&model, SigmaRule::gauss_hermite(2, 3).unwrap()).unwrap(),
        ] {
            let out = provider.flow(&m0, &p0, 0.0, dt, 50).unwrap();
            assert!((&out.mean - &m_exact).amax() < 1e-8, "{}", provider.name());
            assert!((&out.cov - &p_exact).amax() < 1e-6, "{}", provider.name());
            let cross_exact = &p0 * phi.transpose();
            assert!((&out.cross - cross_exact).amax() < 1e-8, "{}", provider.name());
        }
    }

    #[test]
    fn gauss_flow_reports_lost_definiteness() {
        let model = ou_model();
        let ode = MomentOde::gauss(&model, SigmaRule::cubature(1).unwrap()).unwrap();
        let r = ode.flow(&v1(0.0), &DMatrix::from_element(1, 1, -1.0), 0.0, 0.1, 1);
        assert!(matches!(r, Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn method_names_round_trip() {
        for name in ["tme2", "tme3", "tme4", "em", "ito15", "milstein", "linode", "gaussode"] {
            let m: Method = name.parse().unwrap();
            assert_eq!(m.to_string(), name);
        }
        assert!("tme0".parse::<Method>().is_err());
        assert!("rk4".parse::<Method>().is_err());
    }
}

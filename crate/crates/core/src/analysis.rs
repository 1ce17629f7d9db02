//! Positive-definiteness certificates for the TME covariance and the
//! filter/smoother error bounds.
//!
//! By Weyl's inequality `mineig(Σ_M) ≥ P_M(Δt) = Σ_r w_r Δtʳ` with
//! `w_r = mineig(Φ_r)/r!`, so `P_M > 0` on an interval certifies `Σ_M ≻ 0`
//! there. The converse does not hold.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::SdeModel;
use crate::tme::{factorial, phi_direct};

/// Minimum eigenvalues within this (relative) tolerance of zero are treated as zero.
pub const EIGEN_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-8;
pub const DEFAULT_GRID: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    CertifiedPd,
    NotCertified,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::CertifiedPd => "certified p.d.",
            Verdict::NotCertified => "not certified",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdCertificate {
    pub order: usize,
    pub state: Vec<f64>,
    /// `w[r−1] = mineig(Φ_r)/r!` for `r = 1..=M`.
    pub weights: Vec<f64>,
    pub min_eigenvalues: Vec<f64>,
    pub interval: (f64, f64),
    pub verdict: Verdict,
    /// Smallest `Δt` found in the interval with `P_M(Δt) ≤ 0`.
    pub witness: Option<f64>,
}

impl PdCertificate {
    /// `P_M(Δt) = Σ w_r Δtʳ`.
    pub fn lower_bound(&self, dt: f64) -> f64 {
        eval_poly(&self.weights, dt)
    }
}

/// `Σ_{r≥1} w[r−1] Δtʳ`.
fn eval_poly(w: &[f64], dt: f64) -> f64 {
    w.iter().rev().fold(0.0, |acc, c| (acc + c) * dt)
}

fn snap(v: f64, scale: f64) -> f64 {
    if v.abs() <= EIGEN_TOL * scale.max(1.0) {
        0.0
    } else {
        v
    }
}

fn numeric_phi(model: &SdeModel, r: usize, x: &[f64]) -> Result<DMatrix<f64>> {
    let phi = phi_direct(model, r)?.eval(x, 0.0)?;
    let asym = (&phi - phi.transpose()).amax();
    if asym > SYMMETRY_TOL * phi.amax().max(1.0) {
        return Err(Error::Consistency(format!("Φ_{r} is not symmetric (asymmetry {asym:e})")));
    }
    if !linalg::all_finite(&phi) {
        return Err(Error::NonFinite(format!("Φ_{r} at the given state")));
    }
    Ok(linalg::symmetrized(&phi))
}

/// Minimum eigenvalues of `Φ_1..Φ_order` at `x`, with values within
/// tolerance of zero set to zero.
pub fn phi_min_eigenvalues(model: &SdeModel, order: usize, x: &[f64]) -> Result<Vec<f64>> {
    check_state(model, x)?;
    (1..=order)
        .map(|r| {
            let phi = numeric_phi(model, r, x)?;
            Ok(snap(linalg::min_eigenvalue(&phi), phi.amax()))
        })
        .collect()
}

fn check_state(model: &SdeModel, x: &[f64]) -> Result<()> {
    if x.len() != model.dim() {
        return Err(Error::Dimension(format!("state has length {}, model is {}-D", x.len(), model.dim())));
    }
    if !model.is_time_homogeneous() {
        return Err(Error::Config("PD certificates need a time-homogeneous model".into()));
    }
    Ok(())
}

/// Real roots of `Σ_{r≥0} c[r] tʳ` via the companion matrix.
fn real_roots(c: &[f64]) -> Vec<f64> {
    let mut c = c.to_vec();
    while c.last().is_some_and(|v| *v == 0.0) {
        c.pop();
    }
    let n = c.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    let lead = c[n];
    let mut comp = DMatrix::zeros(n, n);
    for i in 1..n {
        comp[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        comp[(i, n - 1)] = -c[i] / lead;
    }
    comp.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-9 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect()
}

/// Checks `P_M(Δt) > 0` on `(lo, hi]`.
///
/// The polynomial is evaluated on a log-spaced grid of `grid` points, at its
/// stationary points and real roots inside the interval, and at `hi`. The
/// first non-positive point is refined by bisection against the preceding
/// positive one.
pub fn certify_pd(model: &SdeModel, order: usize, x: &[f64], interval: (f64, f64), grid: usize) -> Result<PdCertificate> {
    let (lo, hi) = interval;
    if grid < 2 {
        return Err(Error::Config("certificate grid needs at least 2 points".into()));
    }
    if order == 0 {
        return Err(Error::Config("TME order must be at least 1".into()));
    }
    if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::Config(format!("bad interval ({lo}, {hi}]")));
    }
    let mins = phi_min_eigenvalues(model, order, x)?;
    let weights: Vec<f64> = mins.iter().enumerate().map(|(i, m)| m / factorial(i + 1)).collect();

    let start = if lo > 0.0 { lo } else { hi * 1e-12 };
    let mut points: Vec<f64> = (0..grid)
        .map(|i| start * (hi / start).powf(i as f64 / (grid - 1) as f64))
        .collect();
    // Coefficients of P_M and P_M′ in ascending powers.
    let mut coeffs = vec![0.0];
    coeffs.extend(&weights);
    let deriv: Vec<f64> = (1..coeffs.len()).map(|r| r as f64 * coeffs[r]).collect();
    points.extend(real_roots(&coeffs).into_iter().chain(real_roots(&deriv)).filter(|t| *t > lo && *t <= hi));
    points.push(hi);
    points.sort_by(f64::total_cmp);
    points.dedup();

    let p = |t: f64| eval_poly(&weights, t);
    let mut witness = None;
    let mut last_positive: Option<f64> = if lo > 0.0 { None } else { Some(0.0) };
    for &t in &points {
        if p(t) > 0.0 {
            last_positive = Some(t);
            continue;
        }
        let mut bad = t;
        if let Some(mut good) = last_positive {
            if good == 0.0 {
                good = f64::MIN_POSITIVE;
            }
            for _ in 0..200 {
                let mid = 0.5 * (good + bad);
                if mid <= good || mid >= bad {
                    break;
                }
                if p(mid) > 0.0 {
                    good = mid;
                } else {
                    bad = mid;
                }
            }
        }
        witness = Some(bad);
        break;
    }
    Ok(PdCertificate {
        order,
        state: x.to_vec(),
        weights,
        min_eigenvalues: mins,
        interval,
        verdict: if witness.is_none() {
            Verdict::CertifiedPd
        } else {
            Verdict::NotCertified
        },
        witness,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropositionCase {
    Sigma2,
    Sigma3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropositionVerdict {
    /// The sufficient condition holds: `Σ` is p.d. for every `Δt > 0`.
    PdForAllDt,
    /// Holds only through the degenerate case `mineig(Φ₃) = 0`, where the
    /// cubic reduces to the quadratic condition.
    Boundary,
    ConditionFails,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropositionReport {
    pub case: PropositionCase,
    pub verdict: PropositionVerdict,
    /// `mineig(Φ_1..Φ_r)` (`Φ_1 = Γ`, `Φ_2 = ∇fΓ + Γ∇fᵀ`).
    pub min_eigenvalues: Vec<f64>,
    /// For `Σ3`, the right-hand side `−(2√6/3)√(λ₁λ₃)`.
    pub threshold: Option<f64>,
}

/// Sufficient conditions for `Σ₂` / `Σ₃` to be p.d. for all `Δt > 0` at `x`.
pub fn check_proposition1(model: &SdeModel, x: &[f64], case: PropositionCase) -> Result<PropositionReport> {
    let order = match case {
        PropositionCase::Sigma2 => 2,
        PropositionCase::Sigma3 => 3,
    };
    let mins = phi_min_eigenvalues(model, order, x)?;
    let (l1, l2) = (mins[0], mins[1]);
    let (verdict, threshold) = match case {
        PropositionCase::Sigma2 => {
            let ok = (l1 > 0.0 && l2 >= 0.0) || (l1 == 0.0 && l2 > 0.0);
            (if ok { PropositionVerdict::PdForAllDt } else { PropositionVerdict::ConditionFails }, None)
        }
        PropositionCase::Sigma3 => {
            let l3 = mins[2];
            let rhs = -2.0 * 6f64.sqrt() / 3.0 * (l1.max(0.0) * l3.max(0.0)).sqrt();
            let verdict = if l3 < 0.0 || l1 <= 0.0 {
                PropositionVerdict::ConditionFails
            } else if l3 == 0.0 {
                if l2 >= 0.0 {
                    PropositionVerdict::Boundary
                } else {
                    PropositionVerdict::ConditionFails
                }
            } else if l2 > rhs {
                PropositionVerdict::PdForAllDt
            } else {
                PropositionVerdict::ConditionFails
            };
            (verdict, Some(rhs))
        }
    };
    Ok(PropositionReport {
        case,
        verdict,
        min_eigenvalues: mins,
        threshold,
    })
}

/// Constants of the filter stability assumption. `kappa` defaults to
/// `λ_P‖H‖‖V⁻¹‖` when not given.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StabilityBudget {
    pub c_m: f64,
    pub lambda_tau: f64,
    pub lambda_p: f64,
    pub c: f64,
    pub lambda: f64,
    pub lambda_f_sq: f64,
    pub kappa: Option<f64>,
    pub h_norm: f64,
    pub v_inv_norm: f64,
    pub tr_v: f64,
    pub tr_p0: f64,
}

impl StabilityBudget {
    /// Fills `h_norm`, `v_inv_norm` and `tr_v` from a linear measurement model.
    pub fn with_measurement(mut self, h: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<Self> {
        let l = linalg::cholesky_or_err(v, "measurement noise")?;
        let v_inv = linalg::chol_solve(&l, &DMatrix::identity(v.nrows(), v.nrows()));
        self.h_norm = spectral_norm(h);
        self.v_inv_norm = spectral_norm(&v_inv);
        self.tr_v = v.trace();
        Ok(self)
    }

    pub fn kappa(&self) -> f64 {
        self.kappa.unwrap_or(self.lambda_p * self.h_norm * self.v_inv_norm)
    }

    /// `C_e = 4(λ²[Cλ_P + C_M² + λ_τ] + tr(V)κ²)`.
    pub fn c_e(&self) -> f64 {
        let k = self.kappa();
        4.0 * (self.lambda * self.lambda * (self.c * self.lambda_p + self.c_m * self.c_m + self.lambda_tau)
            + self.tr_v * k * k)
    }

    fn validate(&self) -> Result<()> {
        let named = [
            ("C_M", self.c_m),
            ("λ_τ", self.lambda_tau),
            ("λ_P", self.lambda_p),
            ("C", self.c),
            ("λ", self.lambda),
            ("λ_f²", self.lambda_f_sq),
            ("‖H‖", self.h_norm),
            ("‖V⁻¹‖", self.v_inv_norm),
            ("tr(V)", self.tr_v),
            ("tr(P₀)", self.tr_p0),
            ("κ", self.kappa.unwrap_or(0.0)),
        ];
        if let Some((name, v)) = named.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("stability constant {name} = {v} must be finite and non-negative")));
        }
        check_contraction(self.lambda_f_sq)
    }
}

fn check_contraction(lambda_f_sq: f64) -> Result<()> {
    if lambda_f_sq >= 0.25 {
        Err(Error::Assumption(format!("λ_f² = {lambda_f_sq} must be below 1/4 for a finite bound")))
    } else {
        Ok(())
    }
}

fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.clone().svd(false, false).singular_values.max()
}

/// `(4λ_f²)ᵏ tr(P₀) + C_e/(1 − 4λ_f²)`.
pub fn filter_bound(lambda_f_sq: f64, tr_p0: f64, c_e: f64, k: u32) -> Result<f64> {
    check_contraction(lambda_f_sq)?;
    let rho = 4.0 * lambda_f_sq;
    Ok(rho.powi(k as i32) * tr_p0 + c_e / (1.0 - rho))
}

/// `2 tr(P₀) + 2C_e/(1 − 4λ_f²) + 2·gain_term`.
pub fn smoother_bound_with(lambda_f_sq: f64, tr_p0: f64, c_e: f64, gain_term: f64) -> Result<f64> {
    check_contraction(lambda_f_sq)?;
    if !(gain_term.is_finite() && gain_term >= 0.0) {
        return Err(Error::Config(format!("gain term {gain_term} must be finite and non-negative")));
    }
    Ok(2.0 * tr_p0 + 2.0 * c_e / (1.0 - 4.0 * lambda_f_sq) + 2.0 * gain_term)
}

/// Bound on `E‖x_k − m_k‖²`.
pub fn stability_bound(b: &StabilityBudget, k: u32) -> Result<f64> {
    b.validate()?;
    filter_bound(b.lambda_f_sq, b.tr_p0, b.c_e(), k)
}

/// Bound on `E‖x_k − m^s_k‖²`; `gain_term` is the supplied
/// `max_i E[‖G_i‖²‖m^s_{i+1} − m⁻_{i+1}‖²]`. The bound does not depend on `k`.
pub fn smoother_bound(b: &StabilityBudget, _k: u32, gain_term: f64) -> Result<f64> {
    b.validate()?;
    smoother_bound_with(b.lambda_f_sq, b.tr_p0, b.c_e(), gain_term)
}

/// Per-step squared error of the filter mean against the truth, for
/// comparing with [`stability_bound`].
pub fn squared_errors(truth: &[DVector<f64>], means: &[DVector<f64>]) -> Vec<f64> {
    truth.iter().zip(means).map(|(x, m)| (x - m).norm_squared()).collect()
}

//! Continuous-discrete Gaussian filter and smoother.
//!
//! The prediction integrates the provider's conditional moments over the
//! current Gaussian with a sigma-point rule (or hands `(m, P)` to an ODE-flow
//! provider). The update is the usual Gaussian moment-matching step. The
//! smoother is the Rauch–Tung–Striebel recursion driven by the prediction
//! cross-covariances.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::discretize::{MomentProvider, ProviderMode};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{MeasModel, Observation};
use crate::quadrature::SigmaRule;

/// Mean and covariance with a cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: Option<DMatrix<f64>>,
}

impl GaussianState {
    /// Symmetrises `cov` and caches its Cholesky factor when it is numerically PD.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension(format!(
                "mean has length {}, covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = linalg::symmetrized(&cov);
        let chol = linalg::cholesky(&cov);
        Ok(GaussianState { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn chol(&self) -> Option<&DMatrix<f64>> {
        self.chol.as_ref()
    }

    pub fn is_pd(&self) -> bool {
        self.chol.is_some()
    }

    /// A covariance that is exactly zero represents a known state.
    pub fn is_point_mass(&self) -> bool {
        self.cov.iter().all(|v| *v == 0.0)
    }

    fn all_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite()) && linalg::all_finite(&self.cov)
    }

    /// Ok when finite and either PD or a point mass.
    fn check(&self, context: &str) -> Result<()> {
        if !self.all_finite() {
            return Err(Error::NonFinite(context.to_string()));
        }
        if self.is_pd() || self.is_point_mass() {
            Ok(())
        } else {
            Err(Error::not_pd(context, linalg::min_eigenvalue(&self.cov)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceKind {
    NotPd,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    /// Index of the step that failed (1-based for filter steps).
    pub step: usize,
    pub kind: DivergenceKind,
    pub message: String,
}

impl Divergence {
    fn from_error(step: usize, err: &Error) -> Self {
        let kind = match err {
            Error::NotPositiveDefinite { .. } => DivergenceKind::NotPd,
            _ => DivergenceKind::NonFinite,
        };
        Divergence {
            step,
            kind,
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub t: f64,
    pub predicted: GaussianState,
    /// `Cov(x_{k−1}, x_k | y_{1:k−1})`.
    pub cross: DMatrix<f64>,
    pub innovation_mean: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub updated: GaussianState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub t0: f64,
    pub init: GaussianState,
    /// Completed steps only; nothing is recorded past a divergence.
    pub steps: Vec<FilterStep>,
    pub divergence: Option<Divergence>,
}

impl FilterResult {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn means(&self) -> Vec<DVector<f64>> {
        self.steps.iter().map(|s| s.updated.mean.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherResult {
    /// `states[i]` is the smoothed state at index `start + i`, where index 0 is
    /// the initial condition and index `k ≥ 1` is filter step `k`.
    pub start: usize,
    pub states: Vec<GaussianState>,
    /// Set when the backward pass itself failed.
    pub divergence: Option<Divergence>,
    /// The filter diverged and only its clean prefix was smoothed.
    pub truncated: bool,
}

impl SmootherResult {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some() || self.truncated
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FilterOptions {
    /// When set, covariances failing the PD test are repaired by raising their
    /// eigenvalues to at least this value instead of halting.
    pub clip_eigenvalues: Option<f64>,
}

fn clip(cov: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(linalg::symmetrized(cov));
    let vals = eig.eigenvalues.map(|v| if v.is_finite() { v.max(floor) } else { floor });
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    linalg::symmetrize(&mut out);
    out
}

fn finish(mean: DVector<f64>, cov: DMatrix<f64>, context: &str, opts: &FilterOptions) -> Result<GaussianState> {
    let mut state = GaussianState::new(mean, cov)?;
    if let Err(e) = state.check(context) {
        match (opts.clip_eigenvalues, &e) {
            (Some(floor), Error::NotPositiveDefinite { .. }) => {
                state = GaussianState::new(state.mean, clip(&state.cov, floor))?;
                state.check(context)?;
            }
            _ => return Err(e),
        }
    }
    Ok(state)
}

/// One sigma-point pass for a discretization provider over a single interval.
fn predict_once(
    state: &GaussianState,
    provider: &dyn MomentProvider,
    rule: &SigmaRule,
    t: f64,
    dt: f64,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let d = state.dim();
    let points = rule.sigma_points(&state.mean, &state.cov)?;
    let mut means = Vec::with_capacity(points.len());
    let mut m_pred = DVector::zeros(d);
    let mut p_pred = DMatrix::zeros(d, d);
    for (x, w) in points.iter().zip(rule.weights()) {
        let (a, s) = provider.transition(x, t, dt)?;
        m_pred += &a * *w;
        p_pred += s * *w;
        means.push(a);
    }
    let mut cross = DMatrix::zeros(d, d);
    for ((x, a), w) in points.iter().zip(&means).zip(rule.weights()) {
        let da = a - &m_pred;
        p_pred += &da * da.transpose() * *w;
        cross += (x - &state.mean) * da.transpose() * *w;
    }
    Ok((m_pred, p_pred, cross))
}

fn predict_with(
    state: &GaussianState,
    provider: &dyn MomentProvider,
    rule: &SigmaRule,
    t: f64,
    dt: f64,
    substeps: usize,
    opts: &FilterOptions,
) -> Result<(GaussianState, DMatrix<f64>)> {
    if state.dim() != provider.dim() || rule.dim() != provider.dim() {
        return Err(Error::Dimension(format!(
            "state {}-D, provider {}-D, rule {}-D",
            state.dim(),
            provider.dim(),
            rule.dim()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Input(format!("prediction step must be positive, got {dt}")));
    }
    if substeps == 0 {
        return Err(Error::Config("substeps must be at least 1".into()));
    }
    state.check("prior covariance")?;
    if provider.mode() == ProviderMode::OdeFlow {
        let out = provider.flow(&state.mean, &state.cov, t, dt, substeps)?;
        let pred = finish(out.mean, out.cov, "predicted covariance", opts)?;
        return Ok((pred, out.cross));
    }
    let h = dt / substeps as f64;
    let mut current = state.clone();
    let mut cross: Option<DMatrix<f64>> = None;
    for j in 0..substeps {
        let (m, p, dj) = predict_once(&current, provider, rule, t + j as f64 * h, h)?;
        // Cov(x_0, x_j) = Cov(x_0, x_{j−1}) P_{j−1}⁻¹ Cov(x_{j−1}, x_j)
        cross = Some(match cross {
            None => dj,
            Some(c) => match current.chol() {
                Some(l) => linalg::right_divide(&c, l) * dj,
                None => DMatrix::zeros(c.nrows(), c.ncols()),
            },
        });
        current = finish(m, p, "predicted covariance", opts)?;
    }
    Ok((current, cross.expect("at least one substep")))
}

/// Predicts over `dt` with `substeps` chained sub-intervals. Returns the
/// predicted Gaussian and `Cov(x_t, x_{t+dt})`.
pub fn predict(
    state: &GaussianState,
    provider: &dyn MomentProvider,
    rule: &SigmaRule,
    t: f64,
    dt: f64,
    substeps: usize,
) -> Result<(GaussianState, DMatrix<f64>)> {
    predict_with(state, provider, rule, t, dt, substeps, &FilterOptions::default())
}

/// Innovation mean and covariance plus the updated state.
#[derive(Debug, Clone)]
pub struct UpdateOutput {
    pub innovation_mean: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub state: GaussianState,
}

fn update_with(
    pred: &GaussianState,
    meas: &MeasModel,
    rule: &SigmaRule,
    y: &DVector<f64>,
    opts: &FilterOptions,
) -> Result<UpdateOutput> {
    if y.len() != meas.meas_dim() || pred.dim() != meas.state_dim() {
        return Err(Error::Dimension(format!(
            "measurement length {}, model expects {}; state {}-D, model {}-D",
            y.len(),
            meas.meas_dim(),
            pred.dim(),
            meas.state_dim()
        )));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("measurement contains non-finite values".into()));
    }
    pred.check("predicted covariance")?;
    let (mu, mut s, c) = match meas.observation() {
        Observation::Linear(h) => (h * &pred.mean, h * &pred.cov * h.transpose() + meas.noise(), &pred.cov * h.transpose()),
        Observation::Nonlinear { .. } => {
            let points = rule.sigma_points(&pred.mean, &pred.cov)?;
            let zs = points.iter().map(|x| meas.observe(x)).collect::<Result<Vec<_>, _>>()?;
            let mut mu = DVector::zeros(meas.meas_dim());
            for (z, w) in zs.iter().zip(rule.weights()) {
                mu += z * *w;
            }
            let mut s = meas.noise().clone();
            let mut c = DMatrix::zeros(pred.dim(), meas.meas_dim());
            for ((x, z), w) in points.iter().zip(&zs).zip(rule.weights()) {
                let dz = z - &mu;
                s += &dz * dz.transpose() * *w;
                c += (x - &pred.mean) * dz.transpose() * *w;
            }
            (mu, s, c)
        }
    };
    linalg::symmetrize(&mut s);
    let ls = linalg::cholesky_or_err(&s, "innovation covariance")?;
    let k = linalg::right_divide(&c, &ls);
    let mean = &pred.mean + &k * (y - &mu);
    let cov = &pred.cov - &k * &s * k.transpose();
    let state = finish(mean, cov, "updated covariance", opts)?;
    Ok(UpdateOutput {
        innovation_mean: mu,
        innovation_cov: s,
        state,
    })
}

pub fn update(pred: &GaussianState, meas: &MeasModel, rule: &SigmaRule, y: &DVector<f64>) -> Result<UpdateOutput> {
    update_with(pred, meas, rule, y, &FilterOptions::default())
}

/// Runs the filter over measurements `ys[k−1]` taken at `t0 + k·dt`.
/// Numerical failures are recorded in the result, not returned as errors.
#[allow(clippy::too_many_arguments)]
pub fn filter(
    provider: &dyn MomentProvider,
    meas: &MeasModel,
    rule: &SigmaRule,
    ys: &[DVector<f64>],
    t0: f64,
    dt: f64,
    substeps: usize,
    init: &GaussianState,
    opts: &FilterOptions,
) -> Result<FilterResult> {
    if init.dim() != provider.dim() || meas.state_dim() != provider.dim() || rule.dim() != provider.dim() {
        return Err(Error::Dimension("filter inputs disagree on the state dimension".into()));
    }
    if let Some(y) = ys.iter().find(|y| y.len() != meas.meas_dim()) {
        return Err(Error::Dimension(format!(
            "measurement of length {}, model expects {}",
            y.len(),
            meas.meas_dim()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) || substeps == 0 {
        return Err(Error::Config(format!("need dt > 0 and substeps ≥ 1, got dt = {dt}, substeps = {substeps}")));
    }
    let mut result = FilterResult {
        t0,
        init: init.clone(),
        steps: Vec::with_capacity(ys.len()),
        divergence: None,
    };
    if let Err(e) = init.check("initial covariance") {
        result.divergence = Some(Divergence::from_error(0, &e));
        return Ok(result);
    }
    let mut state = init.clone();
    for (i, y) in ys.iter().enumerate() {
        let k = i + 1;
        let t_prev = t0 + i as f64 * dt;
        let step = predict_with(&state, provider, rule, t_prev, dt, substeps, opts).and_then(|(pred, cross)| {
            let up = update_with(&pred, meas, rule, y, opts)?;
            Ok(FilterStep {
                t: t0 + k as f64 * dt,
                predicted: pred,
                cross,
                innovation_mean: up.innovation_mean,
                innovation_cov: up.innovation_cov,
                updated: up.state,
            })
        });
        match step {
            Ok(s) => {
                state = s.updated.clone();
                result.steps.push(s);
            }
            Err(e @ (Error::Dimension(_) | Error::Config(_) | Error::Input(_) | Error::Unsupported { .. })) => {
                return Err(e)
            }
            Err(e) => {
                result.divergence = Some(Divergence::from_error(k, &e));
                break;
            }
        }
    }
    Ok(result)
}

/// Rauch–Tung–Striebel backward pass over the clean part of `fr`, down to
/// and including the initial condition.
pub fn smooth(fr: &FilterResult) -> SmootherResult {
    let n = fr.steps.len();
    let truncated = fr.divergence.is_some();
    let filtered = |k: usize| if k == 0 { &fr.init } else { &fr.steps[k - 1].updated };
    let mut rev = vec![filtered(n).clone()];
    let mut divergence = None;
    for k in (0..n).rev() {
        let next = &fr.steps[k];
        let smoothed_next = rev.last().unwrap();
        let step = (|| -> Result<GaussianState> {
            let l = next
                .predicted
                .chol()
                .ok_or_else(|| Error::not_pd("smoother predicted covariance", linalg::min_eigenvalue(&next.predicted.cov)))?;
            let g = linalg::right_divide(&next.cross, l);
            let cur = filtered(k);
            let mean = &cur.mean + &g * (&smoothed_next.mean - &next.predicted.mean);
            let cov = &cur.cov + &g * (&smoothed_next.cov - &next.predicted.cov) * g.transpose();
            let s = GaussianState::new(mean, cov)?;
            s.check("smoothed covariance")?;
            Ok(s)
        })();
        match step {
            Ok(s) => rev.push(s),
            Err(e) => {
                divergence = Some(Divergence::from_error(k, &e));
                break;
            }
        }
    }
    let start = n + 1 - rev.len();
    rev.reverse();
    SmootherResult {
        start,
        states: rev,
        divergence,
        truncated,
    }
}

/// One row per filter step: `k, t, m_pred_i…, P_pred_ii…, m_i…, P_ii…, diverged`.
/// A diverged run ends with a row holding only `k` and `diverged = 1`.
pub fn write_filter_csv<W: Write>(fr: &FilterResult, out: W) -> Result<()> {
    let d = fr.init.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend((0..d).map(|i| format!("m_pred_{i}")));
    header.extend((0..d).map(|i| format!("P_pred_{i}{i}")));
    header.extend((0..d).map(|i| format!("m_{i}")));
    header.extend((0..d).map(|i| format!("P_{i}{i}")));
    header.push("diverged".into());
    w.write_record(&header)?;
    for (i, s) in fr.steps.iter().enumerate() {
        let mut row = vec![(i + 1).to_string(), s.t.to_string()];
        row.extend(s.predicted.mean.iter().map(f64::to_string));
        row.extend((0..d).map(|j| s.predicted.cov[(j, j)].to_string()));
        row.extend(s.updated.mean.iter().map(f64::to_string));
        row.extend((0..d).map(|j| s.updated.cov[(j, j)].to_string()));
        row.push("0".into());
        w.write_record(&row)?;
    }
    if let Some(div) = &fr.divergence {
        let mut row = vec![div.step.to_string(), (fr.t0 + div.step as f64 * step_dt(fr)).to_string()];
        row.extend(std::iter::repeat_n(String::new(), 4 * d));
        row.push("1".into());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn step_dt(fr: &FilterResult) -> f64 {
    fr.steps.first().map_or(f64::NAN, |s| s.t - fr.t0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{EulerMaruyama, TmeProvider};
    use crate::model::SdeModel;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn hand_kalman_update() {
        let pred = GaussianState::new(DVector::from_element(1, 1.0), scalar(2.0)).unwrap();
        let meas = MeasModel::linear(scalar(1.0), scalar(1.0)).unwrap();
        let rule = SigmaRule::cubature(1).unwrap();
        let out = update(&pred, &meas, &rule, &DVector::from_element(1, 3.0)).unwrap();
        assert!((out.state.mean[0] - 7.0 / 3.0).abs() < 1e-14);
        assert!((out.state.cov[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);
        assert!((out.innovation_cov[(0, 0)] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn uninformative_measurement_keeps_prediction() {
        let pred = GaussianState::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let meas = MeasModel::linear(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 1e12).unwrap();
        let rule = SigmaRule::cubature(2).unwrap();
        let out = update(&pred, &meas, &rule, &DVector::from_vec(vec![5.0, 5.0])).unwrap();
        assert!((&out.state.mean - &pred.mean).amax() < 1e-6);
        assert!((&out.state.cov - &pred.cov).amax() < 1e-6 * 2.0);
    }

    #[test]
    fn point_mass_prior_gives_conditional_moments() {
        let model = SdeModel::parse(&["tanh(x0)"], &[&["1"]], scalar(1.0)).unwrap();
        let tme = TmeProvider::new(&model, 2).unwrap();
        let rule = SigmaRule::gauss_hermite(1, 3).unwrap();
        let prior = GaussianState::new(DVector::from_element(1, 0.5), scalar(0.0)).unwrap();
        let (pred, cross) = predict(&prior, &tme, &rule, 0.0, 1.0, 1).unwrap();
        assert!((pred.mean[0] - 0.9621171572600098).abs() < 1e-12);
        assert!((pred.cov[(0, 0)] - 1.7864477329659274).abs() < 1e-12);
        assert_eq!(cross[(0, 0)], 0.0);
    }

    #[test]
    fn empty_sequence_returns_init() {
        let model = SdeModel::parse(&["-x0"], &[&["1"]], scalar(1.0)).unwrap();
        let em = EulerMaruyama::new(&model);
        let meas = MeasModel::linear(scalar(1.0), scalar(1.0)).unwrap();
        let rule = SigmaRule::cubature(1).unwrap();
        let init = GaussianState::new(DVector::zeros(1), scalar(1.0)).unwrap();
        let fr = filter(&em, &meas, &rule, &[], 0.0, 0.1, 1, &init, &FilterOptions::default()).unwrap();
        assert!(fr.steps.is_empty() && !fr.diverged());
        let sm = smooth(&fr);
        assert_eq!(sm.states, vec![init]);
    }

    #[test]
    fn divergence_is_recorded_and_halts() {
        // TME-2 on dx = -x dt + dW gives variance dt - dt², negative for dt = 2.
        let model = SdeModel::parse(&["-x0"], &[&["1"]], scalar(1.0)).unwrap();
        let tme = TmeProvider::new(&model, 2).unwrap();
        let meas = MeasModel::linear(scalar(1.0), scalar(1.0)).unwrap();
        let rule = SigmaRule::cubature(1).unwrap();
        let init = GaussianState::new(DVector::from_element(1, 1.0), scalar(1.0)).unwrap();
        let ys = vec![DVector::from_element(1, 0.0); 5];
        let fr = filter(&tme, &meas, &rule, &ys, 0.0, 2.0, 1, &init, &FilterOptions::default()).unwrap();
        let div = fr.divergence.as_ref().expect("should diverge");
        assert_eq!(fr.steps.len() + 1, div.step);
        assert_eq!(div.kind, DivergenceKind::NotPd);
        let sm = smooth(&fr);
        assert!(sm.truncated);
        assert_eq!(sm.states.len(), fr.steps.len() + 1 - sm.start);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let model = SdeModel::parse(&["-x0"], &[&["1"]], scalar(1.0)).unwrap();
        let em = EulerMaruyama::new(&model);
        let meas = MeasModel::linear(scalar(1.0), scalar(1.0)).unwrap();
        let rule = SigmaRule::cubature(1).unwrap();
        let init = GaussianState::new(DVector::zeros(1), scalar(1.0)).unwrap();
        let ys = vec![DVector::from_element(1, 0.3); 3];
        let fr = filter(&em, &meas, &rule, &ys, 0.0, 0.5, 2, &init, &FilterOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_filter_csv(&fr, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,t,m_pred_0,P_pred_00,m_0,P_00,diverged");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,1.5,"));
    }

    #[test]
    fn clipping_rescues_an_indefinite_update() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let opts = FilterOptions {
            clip_eigenvalues: Some(1e-6),
        };
        let s = finish(DVector::zeros(2), cov.clone(), "test", &opts).unwrap();
        assert!(s.is_pd());
        assert!(finish(DVector::zeros(2), cov, "test", &FilterOptions::default()).is_err());
    }
}

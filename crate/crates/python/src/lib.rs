//! Python bindings for `tmefs`.
//!
//! Vectors cross the boundary as `list[float]` and matrices as
//! `list[list[float]]` in row-major order.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tmefs::analysis::{self, Verdict};
use tmefs::discretize::Method;
use tmefs::filter::{self, FilterOptions, GaussianState};
use tmefs::model::{MeasModel, SdeModel};
use tmefs::models::{self as builtin, CoordTurnParams};
use tmefs::quadrature::{QuadratureKind, SigmaRule};
use tmefs::symexpr::Expr;
use tmefs::tme;

fn to_py(e: tmefs::Error) -> PyErr {
    match e {
        tmefs::Error::Config(_) | tmefs::Error::Input(_) | tmefs::Error::Dimension(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn sym_to_py(e: tmefs::symexpr::SymError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Symbolic scalar expression in the state `x0, x1, ...` and time `t`.
#[pyclass(name = "Expr", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyExpr(Expr);

#[pymethods]
impl PyExpr {
    #[new]
    fn new(src: &str) -> PyResult<Self> {
        Expr::parse(src).map(PyExpr).map_err(sym_to_py)
    }

    #[pyo3(signature = (x, t = 0.0))]
    fn eval(&self, x: Vec<f64>, t: f64) -> PyResult<f64> {
        self.0.eval(&x, t).map_err(sym_to_py)
    }

    /// Partial derivative with respect to `x{i}`.
    fn diff(&self, i: usize) -> Self {
        PyExpr(self.0.diff_state(i).simplify())
    }

    fn simplify(&self) -> Self {
        PyExpr(self.0.simplify())
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Expr('{}')", self.0)
    }
}

/// Itô SDE `dx = f(x, t) dt + L(x, t) dW` with `E[dW dWᵀ] = Q dt`.
#[pyclass(name = "SdeModel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySdeModel(SdeModel);

#[pymethods]
impl PySdeModel {
    /// `drift` holds one expression per state and `dispersion` one row per state.
    #[new]
    #[pyo3(signature = (drift, dispersion, q = None))]
    fn new(drift: Vec<String>, dispersion: Vec<Vec<String>>, q: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let w = dispersion.first().map_or(0, Vec::len);
        let q = match q {
            Some(q) => matrix(&q)?,
            None => DMatrix::identity(w, w),
        };
        let f: Vec<&str> = drift.iter().map(String::as_str).collect();
        let l: Vec<Vec<&str>> = dispersion.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
        let l: Vec<&[&str]> = l.iter().map(Vec::as_slice).collect();
        SdeModel::parse(&f, &l, q).map(PySdeModel).map_err(to_py)
    }

    #[staticmethod]
    fn tanh() -> Self {
        PySdeModel(builtin::tanh_model())
    }

    #[staticmethod]
    #[pyo3(signature = (a = 1.5))]
    fn sincos3(a: f64) -> PyResult<Self> {
        builtin::sincos3_model(a).map(PySdeModel).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (theta = 1.0, sigma = 1.0))]
    fn ou(theta: f64, sigma: f64) -> PyResult<Self> {
        builtin::ou_model(theta, sigma).map(PySdeModel).map_err(to_py)
    }

    /// Coordinated-turn model with its default parameters.
    #[staticmethod]
    fn coord_turn() -> PyResult<Self> {
        builtin::coord_turn_model(&CoordTurnParams::default()).map(PySdeModel).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn drift(&self) -> Vec<PyExpr> {
        self.0.drift().iter().cloned().map(PyExpr).collect()
    }

    /// `𝒜ʳ g` for an expression `g`.
    fn generator_power(&self, g: &PyExpr, r: usize) -> PyResult<PyExpr> {
        self.0.generator_power(&g.0, r).map(PyExpr).map_err(sym_to_py)
    }

    /// TME mean and covariance of order `order` at state `x` over step `dt`.
    #[pyo3(signature = (order, x, dt, t = 0.0))]
    fn tme_moments(&self, order: usize, x: Vec<f64>, dt: f64, t: f64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let e = tme::expand(&self.0, order).map_err(to_py)?;
        let (m, p) = e.mean_cov(&x, t, dt).map_err(to_py)?;
        Ok((m.as_slice().to_vec(), rows(&p)))
    }

    /// Symbolic TME coefficients: mean terms for `r = 0..=order` and
    /// covariance terms for `r = 1..=order`, as nested lists of strings.
    #[allow(clippy::type_complexity)]
    fn tme_coefficients(&self, order: usize) -> PyResult<(Vec<Vec<String>>, Vec<Vec<Vec<String>>>)> {
        let e = tme::expand(&self.0, order).map_err(to_py)?;
        let d = self.0.dim();
        let mean = (0..=order).map(|r| (0..d).map(|i| e.mean().coeff(r).get(i, 0).to_string()).collect()).collect();
        let cov = (1..=order)
            .map(|r| {
                let c = e.covariance().coeff(r);
                (0..d).map(|i| (0..d).map(|j| c.get(i, j).to_string()).collect()).collect()
            })
            .collect();
        Ok((mean, cov))
    }

    /// Transition mean and covariance from a named method (`tme3`, `em`,
    /// `ito15`, `milstein`, `linode`, `gaussode`).
    #[pyo3(signature = (method, x, dt, t = 0.0, quad = "ckf"))]
    fn transition(&self, method: &str, x: Vec<f64>, dt: f64, t: f64, quad: &str) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let method: Method = method.parse().map_err(to_py)?;
        let quad: QuadratureKind = quad.parse().map_err(to_py)?;
        let provider = method.build(&self.0, quad).map_err(to_py)?;
        let (m, p) = provider.transition(&DVector::from_vec(x), t, dt).map_err(to_py)?;
        Ok((m.as_slice().to_vec(), rows(&p)))
    }
}

/// Result of a positive-definiteness certificate.
#[pyclass(name = "PdCertificate", frozen, get_all)]
struct PyPdCertificate {
    order: usize,
    certified: bool,
    witness: Option<f64>,
    weights: Vec<f64>,
    min_eigenvalues: Vec<f64>,
    interval: (f64, f64),
}

#[pymethods]
impl PyPdCertificate {
    fn lower_bound(&self, dt: f64) -> f64 {
        self.weights.iter().rev().fold(0.0, |acc, c| (acc + c) * dt)
    }

    fn __repr__(&self) -> String {
        format!(
            "PdCertificate(order={}, certified={}, witness={:?})",
            self.order, self.certified, self.witness
        )
    }
}

/// Certifies `Σ_M(Δt) ≻ 0` at state `x` for every `Δt` in `(dt_min, dt_max]`.
#[pyfunction]
#[pyo3(signature = (model, order, x, dt_min = 0.0, dt_max = 100.0, grid = analysis::DEFAULT_GRID))]
fn certify_pd(model: &PySdeModel, order: usize, x: Vec<f64>, dt_min: f64, dt_max: f64, grid: usize) -> PyResult<PyPdCertificate> {
    let c = analysis::certify_pd(&model.0, order, &x, (dt_min, dt_max), grid).map_err(to_py)?;
    Ok(PyPdCertificate {
        order: c.order,
        certified: c.verdict == Verdict::CertifiedPd,
        witness: c.witness,
        weights: c.weights,
        min_eigenvalues: c.min_eigenvalues,
        interval: c.interval,
    })
}

/// Sigma-point rule for Gaussian expectations.
#[pyclass(name = "SigmaRule", frozen)]
struct PySigmaRule(SigmaRule);

#[pymethods]
impl PySigmaRule {
    #[staticmethod]
    fn gauss_hermite(dim: usize, order: usize) -> PyResult<Self> {
        SigmaRule::gauss_hermite(dim, order).map(PySigmaRule).map_err(to_py)
    }

    #[staticmethod]
    fn cubature(dim: usize) -> PyResult<Self> {
        SigmaRule::cubature(dim).map(PySigmaRule).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (dim, alpha = None, beta = None, kappa = None))]
    fn unscented(dim: usize, alpha: Option<f64>, beta: Option<f64>, kappa: Option<f64>) -> PyResult<Self> {
        match (alpha, beta, kappa) {
            (None, None, None) => SigmaRule::unscented_default(dim),
            (a, b, k) => SigmaRule::unscented(dim, a.unwrap_or(1.0), b.unwrap_or(0.0), k.unwrap_or(0.0)),
        }
        .map(PySigmaRule)
        .map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.0.weights().to_vec()
    }

    fn sigma_points(&self, mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let pts = self.0.sigma_points(&DVector::from_vec(mean), &matrix(&cov)?).map_err(to_py)?;
        Ok(pts.iter().map(|p| p.as_slice().to_vec()).collect())
    }

    /// `E[g(x)]` for `x ~ N(mean, cov)` where `g` maps a list to a list.
    fn expect(&self, mean: Vec<f64>, cov: Vec<Vec<f64>>, g: Bound<'_, PyAny>) -> PyResult<Vec<f64>> {
        let m = DVector::from_vec(mean);
        let p = matrix(&cov)?;
        let pts = self.0.sigma_points(&m, &p).map_err(to_py)?;
        let mut acc: Option<DVector<f64>> = None;
        for (x, w) in pts.iter().zip(self.0.weights()) {
            let v: Vec<f64> = g.call1((x.as_slice().to_vec(),))?.extract()?;
            let v = DVector::from_vec(v) * *w;
            acc = Some(match acc {
                Some(a) if a.len() == v.len() => a + v,
                Some(_) => return Err(PyValueError::new_err("g returned lists of different lengths")),
                None => v,
            });
        }
        Ok(acc.map(|a| a.as_slice().to_vec()).unwrap_or_default())
    }
}

/// Filter and smoother output.
#[pyclass(name = "FilterRun", frozen, get_all)]
struct PyFilterRun {
    times: Vec<f64>,
    filter_means: Vec<Vec<f64>>,
    filter_covs: Vec<Vec<Vec<f64>>>,
    /// Smoothed states from the initial condition onwards.
    smoother_means: Vec<Vec<f64>>,
    smoother_covs: Vec<Vec<Vec<f64>>>,
    /// Human-readable divergence description, if any.
    divergence: Option<String>,
    diverged_step: Option<usize>,
}

#[pymethods]
impl PyFilterRun {
    #[getter]
    fn diverged(&self) -> bool {
        self.divergence.is_some()
    }
}

/// Runs the Gaussian filter and RTS smoother on measurements `ys`, where
/// `ys[k-1]` is taken at `t0 + k*dt`. The measurement model is linear when `h`
/// is a matrix and nonlinear when it is a list of expression strings.
#[pyfunction]
#[pyo3(signature = (model, h, v, ys, m0, p0, dt, method = "tme3", quad = "ckf", substeps = 1, t0 = 0.0, clip_eigenvalues = None))]
#[allow(clippy::too_many_arguments)]
fn filter_smooth(
    model: &PySdeModel,
    h: Bound<'_, PyAny>,
    v: Vec<Vec<f64>>,
    ys: Vec<Vec<f64>>,
    m0: Vec<f64>,
    p0: Vec<Vec<f64>>,
    dt: f64,
    method: &str,
    quad: &str,
    substeps: usize,
    t0: f64,
    clip_eigenvalues: Option<f64>,
) -> PyResult<PyFilterRun> {
    let d = model.0.dim();
    let v = matrix(&v)?;
    let meas = if let Ok(exprs) = h.extract::<Vec<String>>() {
        let exprs = exprs.iter().map(|s| Expr::parse(s)).collect::<Result<Vec<_>, _>>().map_err(sym_to_py)?;
        MeasModel::nonlinear(d, exprs, v)
    } else {
        MeasModel::linear(matrix(&h.extract::<Vec<Vec<f64>>>()?)?, v)
    }
    .map_err(to_py)?;
    let method: Method = method.parse().map_err(to_py)?;
    let quad: QuadratureKind = quad.parse().map_err(to_py)?;
    let provider = method.build(&model.0, quad).map_err(to_py)?;
    let rule = quad.build(d).map_err(to_py)?;
    let init = GaussianState::new(DVector::from_vec(m0), matrix(&p0)?).map_err(to_py)?;
    let ys: Vec<DVector<f64>> = ys.into_iter().map(DVector::from_vec).collect();
    let opts = FilterOptions { clip_eigenvalues };
    let fr = filter::filter(provider.as_ref(), &meas, &rule, &ys, t0, dt, substeps, &init, &opts).map_err(to_py)?;
    let sr = filter::smooth(&fr);
    let divergence = fr.divergence.as_ref().or(sr.divergence.as_ref());
    Ok(PyFilterRun {
        times: fr.steps.iter().map(|s| s.t).collect(),
        filter_means: fr.steps.iter().map(|s| s.updated.mean.as_slice().to_vec()).collect(),
        filter_covs: fr.steps.iter().map(|s| rows(&s.updated.cov)).collect(),
        smoother_means: sr.states.iter().map(|s| s.mean.as_slice().to_vec()).collect(),
        smoother_covs: sr.states.iter().map(|s| rows(&s.cov)).collect(),
        divergence: divergence.map(|d| d.message.clone()),
        diverged_step: divergence.map(|d| d.step),
    })
}

#[pymodule]
fn tmefs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExpr>()?;
    m.add_class::<PySdeModel>()?;
    m.add_class::<PySigmaRule>()?;
    m.add_class::<PyPdCertificate>()?;
    m.add_class::<PyFilterRun>()?;
    m.add_function(wrap_pyfunction!(certify_pd, m)?)?;
    m.add_function(wrap_pyfunction!(filter_smooth, m)?)?;
    Ok(())
}

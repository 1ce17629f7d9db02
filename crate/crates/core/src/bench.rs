//! Moment-estimation and tracking experiments.
//!
//! Both experiments read an [`ExperimentConfig`] built from a flat key-value
//! file. Reports serialise to CSV, and run metadata goes to a JSON-lines file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_matrix, parse_model_file, KeyValues};
use crate::discretize::{Method, MomentProvider, ProviderMode};
use crate::error::{Error, Result};
use crate::filter::{self, FilterOptions, GaussianState};
use crate::linalg;
use crate::mc::{self, EnsembleConfig};
use crate::model::{MeasModel, SdeModel};
use crate::models::{self, CoordTurnParams};
use crate::quadrature::QuadratureKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Moments,
    Tracking,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelId {
    Tanh,
    Sincos3,
    CoordTurn,
    Custom(PathBuf),
}

impl ModelId {
    fn name(&self) -> String {
        match self {
            ModelId::Tanh => "tanh".into(),
            ModelId::Sincos3 => "sincos3".into(),
            ModelId::CoordTurn => "coord_turn".into(),
            ModelId::Custom(p) => format!("custom:{}", p.display()),
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "model",
    "model_file",
    "methods",
    "orders",
    "dt",
    "substeps",
    "quad",
    "trials",
    "horizon",
    "seed",
    "output",
    "x0",
    "a",
    "paths",
    "delta",
    "t_grid",
    "t_step",
    "ode_dt",
    "truth_fineness",
    "clip_eigenvalues",
    "m0",
    "P0",
    "rmse_dims",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub model: ModelId,
    pub methods: Vec<Method>,
    pub dts: Vec<f64>,
    pub substeps: Vec<usize>,
    pub quad: QuadratureKind,
    pub trials: usize,
    pub horizon: f64,
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Initial state of the moment experiment.
    pub x0: f64,
    /// Nonlinearity parameter of `sincos3`.
    pub a: f64,
    /// Monte Carlo paths of the moment reference.
    pub paths: usize,
    /// Euler–Maruyama step of the moment reference.
    pub delta: f64,
    /// Evaluation times of the moment experiment.
    pub t_grid: Vec<f64>,
    /// Runge–Kutta step of the moment ODEs.
    pub ode_dt: f64,
    /// Ground-truth step as a fraction of `Δt`.
    pub truth_fineness: f64,
    pub clip_eigenvalues: Option<f64>,
    /// Prior of a custom tracking model.
    pub m0: Option<DVector<f64>>,
    pub p0: Option<DMatrix<f64>>,
    pub rmse_dims: Vec<usize>,
    /// The key-value pairs as given, echoed into the metadata.
    pub echo: KeyValues,
}

impl ExperimentConfig {
    /// Desk-scale defaults for the given experiment.
    pub fn defaults(experiment: Experiment) -> Self {
        let tracking = experiment == Experiment::Tracking;
        let mut cfg = ExperimentConfig {
            experiment,
            model: if tracking { ModelId::CoordTurn } else { ModelId::Tanh },
            methods: if tracking {
                vec![Method::Tme(2), Method::Tme(3), Method::Tme(4), Method::Ito15]
            } else {
                vec![Method::Tme(2), Method::Tme(3), Method::Tme(4), Method::GaussOde, Method::LinOde, Method::Ito15]
            },
            dts: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            substeps: vec![1, 4, 16],
            quad: if tracking { QuadratureKind::Ckf } else { QuadratureKind::Ghkf },
            trials: 20,
            horizon: if tracking { 210.0 } else { 5.0 },
            seed: 2020,
            output: None,
            x0: 0.5,
            a: 1.5,
            paths: 20_000,
            delta: 1e-3,
            t_grid: Vec::new(),
            ode_dt: 1e-3,
            truth_fineness: 1e-3,
            clip_eigenvalues: None,
            m0: None,
            p0: None,
            rmse_dims: vec![0, 2, 4],
            echo: KeyValues::default(),
        };
        cfg.t_grid = uniform_grid(cfg.horizon, 0.05);
        cfg
    }

    /// Parses a config file. Relative model paths resolve against `base_dir`.
    pub fn parse(text: &str, experiment: Experiment, base_dir: Option<&Path>) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        Self::from_key_values(kv, experiment, base_dir)
    }

    pub fn from_key_values(kv: KeyValues, experiment: Experiment, base_dir: Option<&Path>) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown config key '{k}'")));
        }
        let mut cfg = Self::defaults(experiment);
        if let Some(m) = kv.get("model") {
            cfg.model = match m {
                "tanh" => ModelId::Tanh,
                "sincos3" => ModelId::Sincos3,
                "coord_turn" => ModelId::CoordTurn,
                "custom" => {
                    let file = kv
                        .get("model_file")
                        .ok_or_else(|| Error::Config("model = custom needs model_file".into()))?;
                    let path = PathBuf::from(file);
                    ModelId::Custom(match base_dir {
                        Some(dir) if path.is_relative() => dir.join(path),
                        _ => path,
                    })
                }
                other => return Err(Error::Config(format!("unknown model '{other}'"))),
            };
        }
        if cfg.model == ModelId::Sincos3 {
            cfg.x0 = 1.0;
            cfg.methods =
                vec![Method::Tme(2), Method::Tme(3), Method::Tme(4), Method::GaussOde, Method::LinOde, Method::Milstein];
        }
        if let Some(methods) = kv.list::<Method>("methods")? {
            cfg.methods = methods;
        }
        if let Some(orders) = kv.list::<usize>("orders")? {
            cfg.methods.retain(|m| !matches!(m, Method::Tme(_)));
            for o in orders.into_iter().rev() {
                if o == 0 {
                    return Err(Error::Config("TME orders must be at least 1".into()));
                }
                cfg.methods.insert(0, Method::Tme(o));
            }
        }
        if let Some(v) = kv.list("dt")? {
            cfg.dts = v;
        }
        if let Some(v) = kv.list("substeps")? {
            cfg.substeps = v;
        }
        if let Some(q) = kv.parsed("quad")? {
            cfg.quad = q;
        }
        cfg.trials = kv.parsed_or("trials", cfg.trials)?;
        let horizon_given = kv.get("horizon").is_some();
        cfg.horizon = kv.parsed_or("horizon", cfg.horizon)?;
        cfg.seed = kv.parsed_or("seed", cfg.seed)?;
        cfg.output = kv.get("output").map(PathBuf::from);
        cfg.x0 = kv.parsed_or("x0", cfg.x0)?;
        cfg.a = kv.parsed_or("a", cfg.a)?;
        cfg.paths = kv.parsed_or("paths", cfg.paths)?;
        cfg.delta = kv.parsed_or("delta", cfg.delta)?;
        cfg.ode_dt = kv.parsed_or("ode_dt", cfg.ode_dt)?;
        cfg.truth_fineness = kv.parsed_or("truth_fineness", cfg.truth_fineness)?;
        cfg.clip_eigenvalues = kv.parsed("clip_eigenvalues")?;
        if let Some(grid) = kv.list("t_grid")? {
            cfg.t_grid = grid;
        } else if horizon_given || kv.get("t_step").is_some() {
            cfg.t_grid = uniform_grid(cfg.horizon, kv.parsed_or("t_step", 0.05)?);
        }
        if let Some(m0) = kv.get("m0") {
            let v: Vec<f64> = serde_json::from_str(m0)?;
            cfg.m0 = Some(DVector::from_vec(v));
        }
        if let Some(p0) = kv.get("P0") {
            cfg.p0 = Some(parse_matrix(p0)?);
        }
        if let Some(dims) = kv.list("rmse_dims")? {
            cfg.rmse_dims = dims;
        }
        cfg.echo = kv;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.methods.is_empty() {
            return bad("methods must be nonempty");
        }
        if self.horizon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !self.horizon.is_finite() {
            return bad("horizon must be positive");
        }
        match self.experiment {
            Experiment::Tracking => {
                if self.dts.is_empty() || self.substeps.is_empty() || self.rmse_dims.is_empty() {
                    return bad("dt, substeps and rmse_dims must be nonempty");
                }
                if self.dts.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
                    return bad("every dt must be positive");
                }
                if self.substeps.contains(&0) {
                    return bad("substeps must be at least 1");
                }
                if self.trials == 0 {
                    return bad("trials must be at least 1");
                }
                if !(self.truth_fineness > 0.0 && self.truth_fineness <= 1.0) {
                    return bad("truth_fineness must lie in (0, 1]");
                }
                let per = 1.0 / self.truth_fineness;
                if (per - per.round()).abs() > 1e-9 * per {
                    return bad("1/truth_fineness must be a whole number");
                }
                if let Some(c) = self.clip_eigenvalues {
                    if !(c > 0.0 && c.is_finite()) {
                        return bad("clip_eigenvalues must be positive");
                    }
                }
            }
            Experiment::Moments => {
                if self.t_grid.is_empty() || self.t_grid.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                    return bad("t_grid must be nonempty with positive times");
                }
                if self.paths < 2 {
                    return bad("paths must be at least 2");
                }
                if !(self.delta > 0.0 && self.ode_dt > 0.0) {
                    return bad("delta and ode_dt must be positive");
                }
            }
        }
        Ok(())
    }
}

fn uniform_grid(horizon: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) {
        return Vec::new();
    }
    let n = (horizon / step + 1e-9).floor() as usize;
    (1..=n).map(|k| k as f64 * step).collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the data shared by all cells with step `dt`.
pub fn dt_seed(seed: u64, dt: f64) -> u64 {
    splitmix64(seed ^ splitmix64(dt.to_bits()))
}

/// Root mean squared error over `trials × steps × dims`.
pub fn rmse(truth: &[Vec<DVector<f64>>], est: &[Vec<DVector<f64>>], dims: &[usize]) -> Result<f64> {
    if truth.len() != est.len() || dims.is_empty() {
        return Err(Error::Dimension(format!(
            "rmse over {} truth and {} estimate trials with {} dims",
            truth.len(),
            est.len(),
            dims.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (tr, es) in truth.iter().zip(est) {
        if tr.len() != es.len() {
            return Err(Error::Dimension("trial lengths differ".into()));
        }
        for (x, m) in tr.iter().zip(es) {
            if x.len() != m.len() || dims.iter().any(|&d| d >= x.len()) {
                return Err(Error::Dimension("state lengths differ or a dim is out of range".into()));
            }
            for &d in dims {
                sum += (x[d] - m[d]).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Input("rmse over zero entries".into()));
    }
    Ok((sum / count as f64).sqrt())
}

fn load_model(cfg: &ExperimentConfig) -> Result<(SdeModel, Option<MeasModel>)> {
    Ok(match &cfg.model {
        ModelId::Tanh => (models::tanh_model(), None),
        ModelId::Sincos3 => (models::sincos3_model(cfg.a)?, None),
        ModelId::CoordTurn => {
            let p = CoordTurnParams::default();
            (models::coord_turn_model(&p)?, Some(models::coord_turn_measurement(&p)?))
        }
        ModelId::Custom(path) => {
            let text = fs::read_to_string(path)?;
            let mf = parse_model_file(&text)?;
            (mf.model, mf.measurement)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub t: f64,
    pub method: String,
    pub mean: Option<f64>,
    pub var: Option<f64>,
    pub mc_mean: f64,
    pub mc_var: f64,
    pub mc_mean_se: f64,
    pub mc_var_se: f64,
    pub mean_abs_err: Option<f64>,
    pub var_abs_err: Option<f64>,
    /// Empty on success, otherwise the numerical failure.
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub name: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentsReport {
    pub rows: Vec<MomentRow>,
    pub orderings: Vec<OrderingCheck>,
}

impl MomentsReport {
    pub fn row(&self, method: Method, t: f64) -> Option<&MomentRow> {
        let name = method.to_string();
        self.rows.iter().find(|r| r.method == name && (r.t - t).abs() < 1e-12)
    }
}

fn one_shot(provider: &dyn MomentProvider, x0: f64, t: f64, ode_dt: f64) -> Result<(f64, f64)> {
    let x = DVector::from_element(1, x0);
    let (m, p) = match provider.mode() {
        ProviderMode::Discretization => provider.transition(&x, 0.0, t)?,
        ProviderMode::OdeFlow => {
            let steps = (t / ode_dt).ceil().max(1.0) as usize;
            let out = provider.flow(&x, &DMatrix::zeros(1, 1), 0.0, t, steps)?;
            (out.mean, out.cov)
        }
    };
    if !(m[0].is_finite() && p[(0, 0)].is_finite()) {
        return Err(Error::NonFinite(format!("moment estimate at t = {t}")));
    }
    Ok((m[0], p[(0, 0)]))
}

/// Compares one-shot moment estimates from `x0` with a Monte Carlo reference
/// on the configured time grid.
pub fn run_moments_experiment(cfg: &ExperimentConfig) -> Result<MomentsReport> {
    if cfg.experiment != Experiment::Moments {
        return Err(Error::Config("not a moments configuration".into()));
    }
    cfg.validate()?;
    let (model, _) = load_model(cfg)?;
    if model.dim() != 1 {
        return Err(Error::Config(format!("the moment experiment needs a scalar model, got {}-D", model.dim())));
    }
    let providers = cfg
        .methods
        .iter()
        .map(|m| m.build(&model, cfg.quad).map_err(|e| Error::Config(format!("method {m}: {e}"))))
        .collect::<Result<Vec<_>>>()?;

    let references: Vec<mc::McMoments> = if cfg.model == ModelId::Sincos3 {
        cfg.t_grid
            .iter()
            .map(|&t| mc::mc_moments_scalar(&mc::sample_exact_model24(cfg.a, cfg.x0, t, cfg.paths, cfg.seed)?))
            .collect::<Result<_>>()?
    } else {
        let ens = mc::simulate_ensemble(
            &model,
            &EnsembleConfig {
                x0: DVector::from_element(1, cfg.x0),
                t0: 0.0,
                delta: cfg.delta,
                record_times: cfg.t_grid.clone(),
                n_paths: cfg.paths,
                seed: cfg.seed,
            },
        )?;
        ens.iter().map(|s| mc::mc_moments(s)).collect::<Result<_>>()?
    };

    let mut rows = Vec::with_capacity(cfg.t_grid.len() * providers.len());
    for (&t, reference) in cfg.t_grid.iter().zip(&references) {
        let (mc_mean, mc_var) = (reference.mean[0], reference.cov[(0, 0)]);
        for (method, provider) in cfg.methods.iter().zip(&providers) {
            let est = one_shot(provider.as_ref(), cfg.x0, t, cfg.ode_dt);
            let (mean, var, error) = match est {
                Ok((m, v)) => (Some(m), Some(v), String::new()),
                Err(e) => (None, None, e.to_string()),
            };
            rows.push(MomentRow {
                t,
                method: method.to_string(),
                mean,
                var,
                mc_mean,
                mc_var,
                mc_mean_se: reference.mean_se[0],
                mc_var_se: reference.cov_se[(0, 0)],
                mean_abs_err: mean.map(|m| (m - mc_mean).abs()),
                var_abs_err: var.map(|v| (v - mc_var).abs()),
                error,
            });
        }
    }
    let mut report = MomentsReport {
        rows,
        orderings: Vec::new(),
    };
    report.orderings = moment_orderings(&report, &cfg.methods);
    Ok(report)
}

const ORDERING_TIME: f64 = 0.4;

fn moment_orderings(report: &MomentsReport, methods: &[Method]) -> Vec<OrderingCheck> {
    let at = |m: Method| report.row(m, ORDERING_TIME);
    let mut checks = Vec::new();
    if let Some(tme4) = at(Method::Tme(4)).and_then(|r| r.mean_abs_err) {
        let others: Vec<f64> = methods
            .iter()
            .filter(|&&m| m != Method::Tme(4))
            .filter_map(|&m| at(m).and_then(|r| r.mean_abs_err))
            .collect();
        if !others.is_empty() {
            checks.push(OrderingCheck {
                name: "tme4 mean error smallest at t=0.4".into(),
                holds: others.iter().all(|&e| tme4 <= e),
            });
        }
    }
    if let (Some(e2), Some(e4)) = (
        at(Method::Tme(2)).and_then(|r| r.var_abs_err),
        at(Method::Tme(4)).and_then(|r| r.var_abs_err),
    ) {
        checks.push(OrderingCheck {
            name: "tme2 variance error <= tme4 variance error at t=0.4".into(),
            holds: e2 <= e4,
        });
    }
    checks
}

/// One simulated trial: truth at `k·Δt` for `k = 0..=n` and measurements for
/// `k = 1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    pub truth: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
}

/// Draws `x₀ ~ N(m₀, P₀)`, simulates the truth with Euler–Maruyama at
/// `Δt·fineness` and adds measurement noise.
#[allow(clippy::too_many_arguments)]
pub fn simulate_trial(
    model: &SdeModel,
    meas: &MeasModel,
    m0: &DVector<f64>,
    p0_chol: &DMatrix<f64>,
    dt: f64,
    n_steps: usize,
    fineness: f64,
    seed: u64,
    trial: u64,
) -> Result<TrialData> {
    let mut rng = mc::path_rng(seed, trial);
    let z = DVector::from_fn(m0.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let x0 = m0 + p0_chol * z;
    let per = (1.0 / fineness).round() as usize;
    let truth = mc::simulate_recorded(model, &x0, 0.0, dt / per as f64, per, n_steps, &mut rng)?;
    let v_chol = meas.noise_chol();
    let measurements = truth[1..]
        .iter()
        .map(|x| {
            let e = DVector::from_fn(meas.meas_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            Ok(meas.observe(x)? + v_chol * e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialData { truth, measurements })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub method: String,
    pub dt: f64,
    pub substeps: usize,
    pub trial: usize,
    pub diverged: bool,
    /// `filter`, `smoother` or `error`; empty when the trial converged.
    pub diverged_in: String,
    pub divergence_step: Option<usize>,
    pub filter_mse: Option<f64>,
    pub smoother_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRow {
    pub method: String,
    pub dt: f64,
    pub substeps: usize,
    pub n_trials: usize,
    pub n_diverged: usize,
    pub n_used: usize,
    pub filter_rmse: Option<f64>,
    pub smoother_rmse: Option<f64>,
    /// Mean wall-clock seconds per filter step, excluded from reproducibility.
    pub wall_per_step_s: f64,
    /// Empty when the method applies to the model.
    pub status: String,
}

impl CellRow {
    /// Equality of everything except the wall-clock time.
    pub fn same_results(&self, other: &CellRow) -> bool {
        let strip = |c: &CellRow| CellRow {
            wall_per_step_s: 0.0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingReport {
    pub cells: Vec<CellRow>,
    pub trials: Vec<TrialRow>,
}

impl TrackingReport {
    pub fn cell(&self, method: Method, dt: f64, substeps: usize) -> Option<&CellRow> {
        let name = method.to_string();
        self.cells.iter().find(|c| c.method == name && c.dt == dt && c.substeps == substeps)
    }
}

struct TrialOutcome {
    row: TrialRow,
    filter_means: Option<Vec<DVector<f64>>>,
    smoother_means: Option<Vec<DVector<f64>>>,
    seconds: f64,
    steps: usize,
}

struct TrackingSetup {
    model: SdeModel,
    meas: MeasModel,
    m0: DVector<f64>,
    p0: DMatrix<f64>,
}

fn tracking_setup(cfg: &ExperimentConfig) -> Result<TrackingSetup> {
    let (model, meas) = load_model(cfg)?;
    let meas = meas.ok_or_else(|| Error::Config("tracking needs a model with a measurement".into()))?;
    let (m0, p0) = match (&cfg.model, &cfg.m0, &cfg.p0) {
        (_, Some(m), Some(p)) => (m.clone(), p.clone()),
        (ModelId::CoordTurn, None, None) => {
            let p = CoordTurnParams::default();
            (p.m0, p.p0)
        }
        _ => return Err(Error::Config("give both m0 and P0 for this model".into())),
    };
    let d = model.dim();
    if m0.len() != d || p0.nrows() != d || p0.ncols() != d || meas.state_dim() != d {
        return Err(Error::Dimension("m0, P0 and the measurement must match the state dimension".into()));
    }
    if cfg.rmse_dims.iter().any(|&i| i >= d) {
        return Err(Error::Config("rmse_dims out of range".into()));
    }
    Ok(TrackingSetup { model, meas, m0, p0 })
}

/// Runs one `(method, Δt, substeps)` cell on shared trial data.
fn run_cell(
    cfg: &ExperimentConfig,
    setup: &TrackingSetup,
    method: Method,
    dt: f64,
    substeps: usize,
    data: &[TrialData],
) -> Result<(CellRow, Vec<TrialRow>)> {
    let unsupported = |reason: String| CellRow {
        method: method.to_string(),
        dt,
        substeps,
        n_trials: data.len(),
        n_diverged: 0,
        n_used: 0,
        filter_rmse: None,
        smoother_rmse: None,
        wall_per_step_s: 0.0,
        status: reason,
    };
    let provider = match method.build(&setup.model, cfg.quad) {
        Ok(p) => p,
        Err(e @ Error::Unsupported { .. }) => return Ok((unsupported(e.to_string()), Vec::new())),
        Err(e) => return Err(e),
    };
    let rule = cfg.quad.build(setup.model.dim())?;
    let init = GaussianState::new(setup.m0.clone(), setup.p0.clone())?;
    let opts = FilterOptions {
        clip_eigenvalues: cfg.clip_eigenvalues,
    };
    let outcomes: Vec<TrialOutcome> = data
        .par_iter()
        .enumerate()
        .map(|(i, trial)| {
            let mut row = TrialRow {
                method: method.to_string(),
                dt,
                substeps,
                trial: i,
                diverged: false,
                diverged_in: String::new(),
                divergence_step: None,
                filter_mse: None,
                smoother_mse: None,
            };
            let start = Instant::now();
            let fr = filter::filter(
                provider.as_ref(),
                &setup.meas,
                &rule,
                &trial.measurements,
                0.0,
                dt,
                substeps,
                &init,
                &opts,
            );
            let seconds = start.elapsed().as_secs_f64();
            let fr = match fr {
                Ok(fr) => fr,
                Err(_) => {
                    row.diverged = true;
                    row.diverged_in = "error".into();
                    return TrialOutcome {
                        row,
                        filter_means: None,
                        smoother_means: None,
                        seconds,
                        steps: 0,
                    };
                }
            };
            let steps = fr.steps.len();
            if let Some(d) = &fr.divergence {
                row.diverged = true;
                row.diverged_in = "filter".into();
                row.divergence_step = Some(d.step);
                return TrialOutcome {
                    row,
                    filter_means: None,
                    smoother_means: None,
                    seconds,
                    steps,
                };
            }
            let sr = filter::smooth(&fr);
            if let Some(d) = &sr.divergence {
                row.diverged = true;
                row.diverged_in = "smoother".into();
                row.divergence_step = Some(d.step);
                return TrialOutcome {
                    row,
                    filter_means: None,
                    smoother_means: None,
                    seconds,
                    steps,
                };
            }
            let fm = fr.means();
            let sm: Vec<DVector<f64>> = sr.states[1..].iter().map(|s| s.mean.clone()).collect();
            let truth = &trial.truth[1..];
            let one = |est: &[DVector<f64>]| {
                rmse(&[truth.to_vec()], &[est.to_vec()], &cfg.rmse_dims).ok().map(|r| r * r)
            };
            row.filter_mse = one(&fm);
            row.smoother_mse = one(&sm);
            TrialOutcome {
                row,
                filter_means: Some(fm),
                smoother_means: Some(sm),
                seconds,
                steps,
            }
        })
        .collect();

    let mut truths = Vec::new();
    let mut f_est = Vec::new();
    let mut s_est = Vec::new();
    for (o, trial) in outcomes.iter().zip(data) {
        if let (Some(f), Some(s)) = (&o.filter_means, &o.smoother_means) {
            truths.push(trial.truth[1..].to_vec());
            f_est.push(f.clone());
            s_est.push(s.clone());
        }
    }
    let n_used = truths.len();
    let (filter_rmse, smoother_rmse) = if n_used > 0 && !truths[0].is_empty() {
        (
            Some(rmse(&truths, &f_est, &cfg.rmse_dims)?),
            Some(rmse(&truths, &s_est, &cfg.rmse_dims)?),
        )
    } else {
        (None, None)
    };
    let total_steps: usize = outcomes.iter().map(|o| o.steps).sum();
    let total_seconds: f64 = outcomes.iter().map(|o| o.seconds).sum();
    let cell = CellRow {
        method: method.to_string(),
        dt,
        substeps,
        n_trials: data.len(),
        n_diverged: outcomes.iter().filter(|o| o.row.diverged).count(),
        n_used,
        filter_rmse,
        smoother_rmse,
        wall_per_step_s: if total_steps > 0 { total_seconds / total_steps as f64 } else { 0.0 },
        status: String::new(),
    };
    Ok((cell, outcomes.into_iter().map(|o| o.row).collect()))
}

fn tracking_data(cfg: &ExperimentConfig, setup: &TrackingSetup, dt: f64) -> Result<Vec<TrialData>> {
    let n_steps = (cfg.horizon / dt + 1e-9).floor() as usize;
    if n_steps == 0 {
        return Err(Error::Config(format!("dt = {dt} exceeds the horizon {}", cfg.horizon)));
    }
    let p0_chol = linalg::cholesky_or_err(&setup.p0, "P0")?;
    let seed = dt_seed(cfg.seed, dt);
    (0..cfg.trials as u64)
        .into_par_iter()
        .map(|trial| {
            simulate_trial(
                &setup.model,
                &setup.meas,
                &setup.m0,
                &p0_chol,
                dt,
                n_steps,
                cfg.truth_fineness,
                seed,
                trial,
            )
        })
        .collect()
}

/// Runs the full `(method, Δt, substeps)` grid. All cells with the same `Δt`
/// share trial data.
pub fn run_tracking_experiment(cfg: &ExperimentConfig) -> Result<TrackingReport> {
    if cfg.experiment != Experiment::Tracking {
        return Err(Error::Config("not a tracking configuration".into()));
    }
    cfg.validate()?;
    let setup = tracking_setup(cfg)?;
    let mut report = TrackingReport {
        cells: Vec::new(),
        trials: Vec::new(),
    };
    for &dt in &cfg.dts {
        let data = tracking_data(cfg, &setup, dt)?;
        for &method in &cfg.methods {
            for &substeps in &cfg.substeps {
                let (cell, rows) = run_cell(cfg, &setup, method, dt, substeps, &data)?;
                report.cells.push(cell);
                report.trials.extend(rows);
            }
        }
    }
    Ok(report)
}

/// Runs a single cell, reproducing the corresponding row of the full grid.
pub fn run_tracking_cell(cfg: &ExperimentConfig, method: Method, dt: f64, substeps: usize) -> Result<(CellRow, Vec<TrialRow>)> {
    cfg.validate()?;
    let setup = tracking_setup(cfg)?;
    let data = tracking_data(cfg, &setup, dt)?;
    run_cell(cfg, &setup, method, dt, substeps, &data)
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// The first JSON-lines metadata record of a run.
pub fn run_metadata(cfg: &ExperimentConfig) -> serde_json::Value {
    let config: serde_json::Map<String, serde_json::Value> =
        cfg.echo.iter().map(|(k, v)| (k.to_string(), serde_json::Value::from(v))).collect();
    serde_json::json!({
        "record": "run",
        "experiment": match cfg.experiment { Experiment::Moments => "moments", Experiment::Tracking => "track" },
        "model": cfg.model.name(),
        "seed": cfg.seed,
        "tmefs_version": env!("CARGO_PKG_VERSION"),
        "rng": mc::RNG_ALGORITHM,
        "methods": cfg.methods.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "quadrature": cfg.quad.to_string(),
        "config": config,
    })
}

fn write_jsonl(path: &Path, records: &[serde_json::Value]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Writes `moments.csv` and `metadata.jsonl` into `dir`.
pub fn write_moments_outputs(cfg: &ExperimentConfig, report: &MomentsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&report.rows, fs::File::create(dir.join("moments.csv"))?)?;
    let mut records = vec![run_metadata(cfg)];
    records.extend(report.orderings.iter().map(|c| {
        serde_json::json!({ "record": "ordering", "check": c.name, "holds": c.holds })
    }));
    write_jsonl(&dir.join("metadata.jsonl"), &records)
}

/// Writes `cells.csv`, `trials.csv` and `metadata.jsonl` into `dir`.
pub fn write_tracking_outputs(cfg: &ExperimentConfig, report: &TrackingReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&report.cells, fs::File::create(dir.join("cells.csv"))?)?;
    write_csv(&report.trials, fs::File::create(dir.join("trials.csv"))?)?;
    write_jsonl(&dir.join("metadata.jsonl"), &[run_metadata(cfg)])
}

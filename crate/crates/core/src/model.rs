//! SDE and measurement models, and the infinitesimal generator.
//!
//! The state follows `dx = f(x, t) dt + L(x, t) dW` with `E[dW dWᵀ] = Q dt`;
//! measurements are `y_k = h(x_k) + v_k`, `v_k ~ N(0, V)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::symexpr::{Expr, ExprMatrix, Program, SymError};

/// Default cap on the node count of any single generator iterate.
pub const DEFAULT_NODE_BUDGET: usize = 200_000;

#[derive(Debug, Clone)]
pub struct SdeModel {
    dim: usize,
    drift: Vec<Expr>,
    dispersion: ExprMatrix,
    diffusion: DMatrix<f64>,
    gamma: ExprMatrix,
    time_homogeneous: bool,
    constant_dispersion: bool,
    node_budget: usize,
}

impl SdeModel {
    /// Builds a model from drift `f` (length D), dispersion `L` (D×S) and the
    /// Wiener diffusion matrix `Q` (S×S, symmetric PSD).
    pub fn new(drift: Vec<Expr>, dispersion: ExprMatrix, diffusion: DMatrix<f64>) -> Result<Self> {
        let dim = drift.len();
        if dim == 0 {
            return Err(Error::Model("state dimension must be positive".into()));
        }
        if dispersion.rows() != dim {
            return Err(Error::Dimension(format!(
                "dispersion has {} rows, drift has {dim} entries",
                dispersion.rows()
            )));
        }
        let noise_dim = dispersion.cols();
        if diffusion.nrows() != noise_dim || diffusion.ncols() != noise_dim {
            return Err(Error::Dimension(format!(
                "diffusion is {}x{}, dispersion has {noise_dim} columns",
                diffusion.nrows(),
                diffusion.ncols()
            )));
        }
        for e in drift.iter().chain(dispersion.entries()) {
            e.check_dim(dim)?;
        }
        let asym = (&diffusion - diffusion.transpose()).amax();
        if asym > 1e-12 * diffusion.amax().max(1.0) {
            return Err(Error::Model(format!("diffusion matrix is not symmetric ({asym:e})")));
        }
        if noise_dim > 0 {
            let min = linalg::min_eigenvalue(&diffusion);
            if !(min >= -1e-12) {
                return Err(Error::Model(format!("diffusion matrix is not PSD (min eigenvalue {min:e})")));
            }
        }

        let drift: Vec<Expr> = drift.iter().map(Expr::simplify).collect();
        let dispersion = dispersion.simplify();
        let gamma = diffusion_matrix(&dispersion, &diffusion);
        let time_homogeneous =
            !drift.iter().any(Expr::references_time) && !dispersion.references_time();
        let constant_dispersion = !dispersion.references_state();
        Ok(SdeModel {
            dim,
            drift,
            dispersion,
            diffusion,
            gamma,
            time_homogeneous,
            constant_dispersion,
            node_budget: DEFAULT_NODE_BUDGET,
        })
    }

    /// Parses drift and dispersion entries from the infix grammar.
    pub fn parse(drift: &[&str], dispersion: &[&[&str]], diffusion: DMatrix<f64>) -> Result<Self> {
        let dim = drift.len();
        let f = drift
            .iter()
            .map(|s| Expr::parse_with_dim(s, dim))
            .collect::<Result<Vec<_>, _>>()?;
        let cols = dispersion.first().map_or(0, |r| r.len());
        if dispersion.len() != dim || dispersion.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("dispersion rows must all match the state dimension".into()));
        }
        let mut l = ExprMatrix::zeros(dim, cols);
        for (i, row) in dispersion.iter().enumerate() {
            for (j, s) in row.iter().enumerate() {
                l.set(i, j, Expr::parse_with_dim(s, dim)?);
            }
        }
        SdeModel::new(f, l, diffusion)
    }

    pub fn with_node_budget(mut self, budget: usize) -> Self {
        self.node_budget = budget;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.dispersion.cols()
    }

    pub fn drift(&self) -> &[Expr] {
        &self.drift
    }

    pub fn dispersion(&self) -> &ExprMatrix {
        &self.dispersion
    }

    pub fn diffusion(&self) -> &DMatrix<f64> {
        &self.diffusion
    }

    /// `Γ = L Q Lᵀ`, simplified and exactly symmetric.
    pub fn gamma(&self) -> &ExprMatrix {
        &self.gamma
    }

    pub fn is_time_homogeneous(&self) -> bool {
        self.time_homogeneous
    }

    pub fn has_constant_dispersion(&self) -> bool {
        self.constant_dispersion
    }

    pub fn node_budget(&self) -> usize {
        self.node_budget
    }

    /// Jacobian `J[i][j] = ∂f_i/∂x_j`, simplified.
    pub fn drift_jacobian(&self) -> ExprMatrix {
        ExprMatrix::from_fn(self.dim, self.dim, |i, j| self.drift[i].diff_state(j).simplify())
    }

    pub fn drift_at(&self, x: &[f64], t: f64) -> Result<DVector<f64>, SymError> {
        let mut out = DVector::zeros(self.dim);
        for (o, f) in out.iter_mut().zip(&self.drift) {
            *o = f.eval(x, t)?;
        }
        Ok(out)
    }

    pub fn gamma_at(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>, SymError> {
        self.gamma.eval(x, t)
    }

    pub fn dispersion_at(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>, SymError> {
        self.dispersion.eval(x, t)
    }

    /// Applies the generator
    /// `𝒜g = ∂g/∂t + Σᵢ ∂g/∂xᵢ fᵢ + ½ Σᵢⱼ ∂²g/∂xᵢ∂xⱼ Γᵢⱼ` and simplifies.
    pub fn generator(&self, g: &Expr) -> Expr {
        let mut terms = vec![g.diff_time()];
        let grads: Vec<Expr> = (0..self.dim).map(|i| g.diff_state(i).simplify()).collect();
        for (grad, f) in grads.iter().zip(&self.drift) {
            if !grad.is_zero() && !f.is_zero() {
                terms.push(grad * f);
            }
        }
        for i in 0..self.dim {
            if grads[i].is_zero() {
                continue;
            }
            for j in i..self.dim {
                let gij = self.gamma.get(i, j);
                if gij.is_zero() {
                    continue;
                }
                // Γ is symmetric, so the (i, j) and (j, i) halves combine.
                let weight = if i == j { 0.5 } else { 1.0 };
                let hess = grads[i].diff_state(j);
                terms.push(Expr::product(vec![Expr::constant(weight), hess, gij.clone()]));
            }
        }
        Expr::sum(terms).simplify()
    }

    /// `𝒜ʳ g` with simplification after each application.
    pub fn generator_power(&self, g: &Expr, r: usize) -> Result<Expr, SymError> {
        Ok(self.generator_powers(g, r)?.pop().unwrap())
    }

    /// `[g, 𝒜g, …, 𝒜ʳg]`. Fails once an iterate exceeds the node budget.
    pub fn generator_powers(&self, g: &Expr, r: usize) -> Result<Vec<Expr>, SymError> {
        let mut out = Vec::with_capacity(r + 1);
        out.push(g.simplify());
        for k in 1..=r {
            let next = self.generator(out.last().unwrap());
            if next.size() > self.node_budget {
                return Err(SymError::Budget {
                    reached: k,
                    nodes: next.size(),
                    budget: self.node_budget,
                });
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Compiles drift and dispersion into tapes for fast repeated evaluation.
    pub fn compile(&self) -> CompiledSde {
        CompiledSde {
            dim: self.dim,
            noise_dim: self.noise_dim(),
            drift: Program::compile(&self.drift),
            dispersion: Program::compile(self.dispersion.entries()),
        }
    }
}

fn diffusion_matrix(l: &ExprMatrix, q: &DMatrix<f64>) -> ExprMatrix {
    let (d, s) = (l.rows(), l.cols());
    let mut gamma = ExprMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut terms = Vec::new();
            for a in 0..s {
                for b in 0..s {
                    let qab = q[(a, b)];
                    if qab == 0.0 || l.get(i, a).is_zero() || l.get(j, b).is_zero() {
                        continue;
                    }
                    terms.push(Expr::product(vec![
                        Expr::constant(qab),
                        l.get(i, a).clone(),
                        l.get(j, b).clone(),
                    ]));
                }
            }
            let e = Expr::sum(terms).simplify();
            gamma.set(j, i, e.clone());
            gamma.set(i, j, e);
        }
    }
    gamma
}

/// Drift and dispersion tapes.
#[derive(Debug, Clone)]
pub struct CompiledSde {
    pub dim: usize,
    pub noise_dim: usize,
    pub drift: Program,
    /// Row-major `D×S` entries.
    pub dispersion: Program,
}

/// Observation function: either an exact linear map or symbolic `h(x)`.
#[derive(Debug, Clone)]
pub enum Observation {
    Linear(DMatrix<f64>),
    Nonlinear { exprs: Vec<Expr>, program: Program },
}

#[derive(Debug, Clone)]
pub struct MeasModel {
    state_dim: usize,
    observation: Observation,
    noise: DMatrix<f64>,
    noise_chol: DMatrix<f64>,
}

impl MeasModel {
    pub fn linear(h: DMatrix<f64>, noise: DMatrix<f64>) -> Result<Self> {
        let state_dim = h.ncols();
        MeasModel::build(state_dim, h.nrows(), Observation::Linear(h), noise)
    }

    pub fn nonlinear(state_dim: usize, h: Vec<Expr>, noise: DMatrix<f64>) -> Result<Self> {
        for e in &h {
            e.check_dim(state_dim)?;
        }
        let exprs: Vec<Expr> = h.iter().map(Expr::simplify).collect();
        let program = Program::compile(&exprs);
        let z = exprs.len();
        MeasModel::build(state_dim, z, Observation::Nonlinear { exprs, program }, noise)
    }

    fn build(state_dim: usize, z: usize, observation: Observation, noise: DMatrix<f64>) -> Result<Self> {
        if z == 0 {
            return Err(Error::Model("measurement dimension must be positive".into()));
        }
        if noise.nrows() != z || noise.ncols() != z {
            return Err(Error::Dimension(format!(
                "measurement noise is {}x{}, expected {z}x{z}",
                noise.nrows(),
                noise.ncols()
            )));
        }
        if (&noise - noise.transpose()).amax() > 1e-12 * noise.amax().max(1.0) {
            return Err(Error::Model("measurement noise is not symmetric".into()));
        }
        let noise_chol = linalg::cholesky_or_err(&noise, "measurement noise")?;
        Ok(MeasModel {
            state_dim,
            observation,
            noise,
            noise_chol,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn meas_dim(&self) -> usize {
        self.noise.nrows()
    }

    pub fn observation(&self) -> &Observation {
        &self.observation
    }

    pub fn noise(&self) -> &DMatrix<f64> {
        &self.noise
    }

    /// Lower Cholesky factor of `V`.
    pub fn noise_chol(&self) -> &DMatrix<f64> {
        &self.noise_chol
    }

    pub fn observe(&self, x: &DVector<f64>) -> Result<DVector<f64>, SymError> {
        match &self.observation {
            Observation::Linear(h) => Ok(h * x),
            Observation::Nonlinear { program, .. } => {
                Ok(DVector::from_vec(program.eval(x.as_slice(), 0.0)?))
            }
        }
    }
}

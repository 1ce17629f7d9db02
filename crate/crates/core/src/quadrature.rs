//! Positive-weight sigma-point rules for `E[g(x)]`, `x ~ N(m, P)`.
//!
//! Unit points `ξᵢ` integrate `N(0, I)`; they are mapped to `m + √P ξᵢ` with
//! `√P` the lower Cholesky factor.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RuleKind {
    /// Tensor-product Gauss–Hermite with `order` points per dimension.
    GaussHermite { order: usize },
    Unscented { alpha: f64, beta: f64, kappa: f64 },
    SphericalCubature,
}

/// CLI-level rule selector, named after the corresponding filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureKind {
    Ghkf,
    Ukf,
    Ckf,
}

impl QuadratureKind {
    pub fn build(self, dim: usize) -> Result<SigmaRule> {
        match self {
            QuadratureKind::Ghkf => SigmaRule::gauss_hermite(dim, 3),
            QuadratureKind::Ukf => SigmaRule::unscented_default(dim),
            QuadratureKind::Ckf => SigmaRule::cubature(dim),
        }
    }
}

impl FromStr for QuadratureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ghkf" | "gh" | "gauss-hermite" => Ok(QuadratureKind::Ghkf),
            "ukf" | "ut" | "unscented" => Ok(QuadratureKind::Ukf),
            "ckf" | "cubature" => Ok(QuadratureKind::Ckf),
            _ => Err(Error::Config(format!("unknown quadrature '{s}' (expected ghkf, ukf or ckf)"))),
        }
    }
}

impl fmt::Display for QuadratureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuadratureKind::Ghkf => "ghkf",
            QuadratureKind::Ukf => "ukf",
            QuadratureKind::Ckf => "ckf",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SigmaRule {
    kind: RuleKind,
    dim: usize,
    points: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

/// Nodes and weights of the `n`-point probabilists' Gauss–Hermite rule
/// (Golub–Welsch on the Hermite Jacobi matrix), nodes ascending.
fn hermite_1d(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrise: the rule is exactly symmetric about zero.
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    (nodes, weights)
}

impl SigmaRule {
    pub fn gauss_hermite(dim: usize, order: usize) -> Result<Self> {
        check_dim(dim)?;
        if order == 0 {
            return Err(Error::Config("Gauss-Hermite order must be positive".into()));
        }
        let (nodes, w1) = hermite_1d(order);
        let count = order
            .checked_pow(dim as u32)
            .filter(|&c| c <= 5_000_000)
            .ok_or_else(|| Error::Config(format!("{order}^{dim} Gauss-Hermite points is too many")))?;
        let mut points = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        let mut idx = vec![0usize; dim];
        for _ in 0..count {
            points.push(DVector::from_iterator(dim, idx.iter().map(|&i| nodes[i])));
            weights.push(idx.iter().map(|&i| w1[i]).product());
            // odometer, last coordinate fastest
            for k in (0..dim).rev() {
                idx[k] += 1;
                if idx[k] < order {
                    break;
                }
                idx[k] = 0;
            }
        }
        SigmaRule::new(RuleKind::GaussHermite { order }, dim, points, weights)
    }

    pub fn cubature(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        let scale = (dim as f64).sqrt();
        let points = axis_points(dim, scale);
        let weights = vec![1.0 / (2 * dim) as f64; 2 * dim];
        SigmaRule::new(RuleKind::SphericalCubature, dim, points, weights)
    }

    /// Unscented rule. The same weights serve every moment, so the covariance
    /// weight of the centre point must equal its mean weight
    /// (`β = α² − 1`), and every weight must be positive.
    pub fn unscented(dim: usize, alpha: f64, beta: f64, kappa: f64) -> Result<Self> {
        check_dim(dim)?;
        let n = dim as f64;
        let lambda = alpha * alpha * (n + kappa) - n;
        if !(n + lambda > 0.0) {
            return Err(Error::Config(format!("unscented spread n + λ = {} must be positive", n + lambda)));
        }
        if (beta - (alpha * alpha - 1.0)).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "unscented β = {beta} gives covariance weights different from mean weights; use β = α² − 1"
            )));
        }
        let w0 = lambda / (n + lambda);
        if !(w0 > 0.0) {
            return Err(Error::Config(format!(
                "unscented parameters give non-positive centre weight {w0}"
            )));
        }
        let mut points = vec![DVector::zeros(dim)];
        points.extend(axis_points(dim, (n + lambda).sqrt()));
        let mut weights = vec![w0];
        weights.extend(std::iter::repeat_n(1.0 / (2.0 * (n + lambda)), 2 * dim));
        SigmaRule::new(RuleKind::Unscented { alpha, beta, kappa }, dim, points, weights)
    }

    /// `α = 1, β = 0, κ = 3 − D`. When that makes the centre weight non-positive
    /// (`D ≥ 3`), falls back to `κ = 0`, whose centre weight is exactly zero,
    /// and drops the centre point.
    pub fn unscented_default(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        let kappa = 3.0 - dim as f64;
        if kappa > 0.0 {
            return SigmaRule::unscented(dim, 1.0, 0.0, kappa);
        }
        let points = axis_points(dim, (dim as f64).sqrt());
        let weights = vec![1.0 / (2 * dim) as f64; 2 * dim];
        SigmaRule::new(
            RuleKind::Unscented {
                alpha: 1.0,
                beta: 0.0,
                kappa: 0.0,
            },
            dim,
            points,
            weights,
        )
    }

    pub fn build(kind: RuleKind, dim: usize) -> Result<Self> {
        match kind {
            RuleKind::GaussHermite { order } => SigmaRule::gauss_hermite(dim, order),
            RuleKind::Unscented { alpha, beta, kappa } => SigmaRule::unscented(dim, alpha, beta, kappa),
            RuleKind::SphericalCubature => SigmaRule::cubature(dim),
        }
    }

    fn new(kind: RuleKind, dim: usize, points: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::Config(format!("sigma-point rule has non-positive weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Consistency(format!("sigma-point weights sum to {total}")));
        }
        Ok(SigmaRule {
            kind,
            dim,
            points,
            weights,
        })
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn unit_points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Points `m + √P ξᵢ`. Fails with `NotPositiveDefinite` when `P` is not
    /// numerically PD (an exactly zero `P` is accepted as a point mass).
    pub fn sigma_points(&self, m: &DVector<f64>, p: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
        if m.len() != self.dim || p.nrows() != self.dim || p.ncols() != self.dim {
            return Err(Error::Dimension(format!(
                "rule is {}-dimensional, got mean {} and covariance {}x{}",
                self.dim,
                m.len(),
                p.nrows(),
                p.ncols()
            )));
        }
        let sqrt = linalg::cov_sqrt(p, "sigma points")?;
        Ok(self.points.iter().map(|xi| m + &sqrt * xi).collect())
    }

    /// `Σᵢ wᵢ g(m + √P ξᵢ)`.
    pub fn gauss_expect<F>(&self, m: &DVector<f64>, p: &DMatrix<f64>, mut g: F) -> Result<DVector<f64>>
    where
        F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    {
        let mut acc: Option<DVector<f64>> = None;
        for (x, w) in self.sigma_points(m, p)?.iter().zip(&self.weights) {
            let v = g(x)? * *w;
            acc = Some(match acc {
                Some(a) => a + v,
                None => v,
            });
        }
        Ok(acc.expect("rules have at least one point"))
    }

    /// Matrix-valued variant of [`SigmaRule::gauss_expect`].
    pub fn gauss_expect_matrix<F>(&self, m: &DVector<f64>, p: &DMatrix<f64>, mut g: F) -> Result<DMatrix<f64>>
    where
        F: FnMut(&DVector<f64>) -> Result<DMatrix<f64>>,
    {
        let mut acc: Option<DMatrix<f64>> = None;
        for (x, w) in self.sigma_points(m, p)?.iter().zip(&self.weights) {
            let v = g(x)? * *w;
            acc = Some(match acc {
                Some(a) => a + v,
                None => v,
            });
        }
        Ok(acc.expect("rules have at least one point"))
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        Err(Error::Config("rule dimension must be positive".into()))
    } else {
        Ok(())
    }
}

/// `±scale·eᵢ` ordered `+e₀, …, +e_{D−1}, −e₀, …`.
fn axis_points(dim: usize, scale: f64) -> Vec<DVector<f64>> {
    let mut points = Vec::with_capacity(2 * dim);
    for sign in [1.0, -1.0] {
        for i in 0..dim {
            let mut p = DVector::zeros(dim);
            p[i] = sign * scale;
            points.push(p);
        }
    }
    points
}

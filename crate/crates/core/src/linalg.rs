//! Small dense helpers shared by the filter, quadrature and analysis code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// A Cholesky pivot must exceed this fraction of the trace for the matrix to
/// count as numerically positive definite.
pub const PD_RELATIVE_TOL: f64 = 1e-14;

pub fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

pub fn symmetrized(p: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = p.clone();
    symmetrize(&mut q);
    q
}

pub fn all_finite(p: &DMatrix<f64>) -> bool {
    p.iter().all(|v| v.is_finite())
}

/// Lower Cholesky factor, or `None` if a pivot falls below
/// `PD_RELATIVE_TOL * trace`.
pub fn cholesky(p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = p.nrows();
    if n != p.ncols() || !all_finite(p) {
        return None;
    }
    let trace = p.trace();
    if !(trace > 0.0) {
        return None;
    }
    let tol = PD_RELATIVE_TOL * trace;
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = p[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tol) {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = p[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

pub fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    if p.nrows() == 0 {
        return f64::INFINITY;
    }
    if !all_finite(p) {
        return f64::NAN;
    }
    SymmetricEigen::new(symmetrized(p)).eigenvalues.min()
}

/// Cholesky factor or a `NotPositiveDefinite` error carrying the minimum eigenvalue.
pub fn cholesky_or_err(p: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    cholesky(p).ok_or_else(|| {
        if all_finite(p) {
            Error::not_pd(context, min_eigenvalue(p))
        } else {
            Error::NonFinite(context.to_string())
        }
    })
}

/// Square root used to place sigma points: the Cholesky factor, except that an
/// exactly zero covariance (a point mass) maps to the zero matrix.
pub fn cov_sqrt(p: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if p.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(p.nrows(), p.ncols()));
    }
    cholesky_or_err(p, context)
}

/// Solves `P X = B` given the lower Cholesky factor of `P`.
pub fn chol_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal");
    l.tr_solve_lower_triangular(&y)
        .expect("Cholesky factor has a positive diagonal")
}

/// Computes `B P^{-1}` given the lower Cholesky factor of symmetric `P`.
pub fn right_divide(b: &DMatrix<f64>, l: &DMatrix<f64>) -> DMatrix<f64> {
    chol_solve(l, &b.transpose()).transpose()
}

pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_agrees_with_nalgebra() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let ours = cholesky(&a).unwrap();
        let theirs = a.clone().cholesky().unwrap().l();
        assert!((ours - theirs).amax() < 1e-14);
    }

    #[test]
    fn rejects_indefinite_and_tiny_pivots() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky(&a).is_none());
        let near_singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-16]);
        assert!(cholesky(&near_singular).is_none());
        match cholesky_or_err(&a, "test") {
            Err(Error::NotPositiveDefinite { min_eigenvalue, .. }) => {
                assert!((min_eigenvalue + 1.0).abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
        let nan = DMatrix::from_element(1, 1, f64::NAN);
        assert!(matches!(cholesky_or_err(&nan, "x"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn solves() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let l = cholesky(&p).unwrap();
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!((&p * chol_solve(&l, &b) - &b).amax() < 1e-14);
        assert!((right_divide(&b, &l) * &p - &b).amax() < 1e-14);
    }
}

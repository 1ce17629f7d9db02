use std::fmt;

use nalgebra::DMatrix;

use super::{Expr, SymError};

/// Dense row-major matrix of expressions.
#[derive(Clone, PartialEq)]
pub struct ExprMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Expr>,
}

impl ExprMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Expr) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        ExprMatrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        ExprMatrix::from_fn(rows, cols, |_, _| Expr::zero())
    }

    pub fn column(entries: Vec<Expr>) -> Self {
        ExprMatrix {
            rows: entries.len(),
            cols: 1,
            data: entries,
        }
    }

    pub fn from_numeric(m: &DMatrix<f64>) -> Self {
        ExprMatrix::from_fn(m.nrows(), m.ncols(), |i, j| Expr::constant(m[(i, j)]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &Expr {
        &self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, e: Expr) {
        self.data[i * self.cols + j] = e;
    }

    /// Entries in row-major order.
    pub fn entries(&self) -> &[Expr] {
        &self.data
    }

    pub fn map(&self, f: impl FnMut(&Expr) -> Expr) -> Self {
        ExprMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn simplify(&self) -> Self {
        self.map(Expr::simplify)
    }

    pub fn transpose(&self) -> Self {
        ExprMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i).clone())
    }

    /// Simplified symbolic product.
    pub fn matmul(&self, other: &ExprMatrix) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions");
        ExprMatrix::from_fn(self.rows, other.cols, |i, j| {
            let terms: Vec<Expr> = (0..self.cols)
                .filter(|&k| !self.get(i, k).is_zero() && !other.get(k, j).is_zero())
                .map(|k| self.get(i, k) * other.get(k, j))
                .collect();
            Expr::sum(terms).simplify()
        })
    }

    pub fn max_size(&self) -> usize {
        self.data.iter().map(Expr::size).max().unwrap_or(0)
    }

    pub fn total_size(&self) -> usize {
        self.data.iter().map(Expr::size).sum()
    }

    pub fn references_state(&self) -> bool {
        self.data.iter().any(Expr::references_state)
    }

    pub fn references_time(&self) -> bool {
        self.data.iter().any(Expr::references_time)
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>, SymError> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = self.get(i, j).eval(x, t)?;
            }
        }
        Ok(out)
    }
}

impl fmt::Debug for ExprMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ExprMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|j| self.get(i, j).to_string()).collect();
            write!(f, "[{}]", row.join(", "))?;
        }
        write!(f, "]")
    }
}

//! Small linear-algebra helpers: the periodic bidiagonal systems produced by
//! one-sided differences, and a rank-revealing least-squares solve.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Which neighbour the off-diagonal couples to, modulo `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// Row `j` couples to `j+1` (upper bidiagonal plus bottom-left corner).
    Next,
    /// Row `j` couples to `j-1` (lower bidiagonal plus top-right corner).
    Prev,
}

/// `A[j][j] = diag[j]`, `A[j][(j ± 1) mod n] = off[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CyclicBidiagonal {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
    pub coupling: Coupling,
}

impl CyclicBidiagonal {
    pub fn new(diag: Vec<f64>, off: Vec<f64>, coupling: Coupling) -> Self {
        assert_eq!(diag.len(), off.len());
        Self {
            diag,
            off,
            coupling,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(vec![1.0; n], vec![0.0; n], Coupling::Next)
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    fn neighbour(&self, j: usize) -> usize {
        let n = self.dim();
        match self.coupling {
            Coupling::Next => (j + 1) % n,
            Coupling::Prev => (j + n - 1) % n,
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| {
            self.diag[j] * x[j] + self.off[j] * x[self.neighbour(j)]
        })
    }

    pub fn transpose(&self) -> Self {
        let n = self.dim();
        // Entry (j, nb(j)) moves to (nb(j), j).
        let mut off = vec![0.0; n];
        for j in 0..n {
            off[self.neighbour(j)] = self.off[j];
        }
        let coupling = match self.coupling {
            Coupling::Next => Coupling::Prev,
            Coupling::Prev => Coupling::Next,
        };
        Self::new(self.diag.clone(), off, coupling)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            m[(j, j)] += self.diag[j];
            m[(j, self.neighbour(j))] += self.off[j];
        }
        m
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::dim("right-hand side", n, b.len()));
        }
        if n == 1 {
            let a = self.diag[0] + self.off[0];
            if a == 0.0 {
                return Err(Error::Singular("1x1 cyclic system".into()));
            }
            return Ok(DVector::from_element(1, b[0] / a));
        }
        let dominant = self
            .diag
            .iter()
            .zip(&self.off)
            .all(|(d, e)| d.abs() > e.abs());
        if !dominant {
            return self.solve_dense(b);
        }
        match self.coupling {
            Coupling::Next => sweep_next(&self.diag, &self.off, b.as_slice()),
            Coupling::Prev => {
                // Reversing the index order turns `j-1` coupling into `j+1`.
                let d: Vec<f64> = self.diag.iter().rev().copied().collect();
                let e: Vec<f64> = self.off.iter().rev().copied().collect();
                let rb: Vec<f64> = b.iter().rev().copied().collect();
                let x = sweep_next(&d, &e, &rb)?;
                Ok(DVector::from_iterator(n, x.iter().rev().copied()))
            }
        }
    }

    pub fn solve_transpose(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.transpose().solve(b)
    }

    fn solve_dense(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.to_dense()
            .lu()
            .solve(b)
            .ok_or_else(|| Error::Singular("cyclic bidiagonal system".into()))
    }
}

/// Back-substitution with the unknown `x_0` carried symbolically:
/// `x_j = p_j + q_j x_0`, closed by row 0.
fn sweep_next(d: &[f64], e: &[f64], b: &[f64]) -> Result<DVector<f64>> {
    let n = d.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    p[n - 1] = b[n - 1] / d[n - 1];
    q[n - 1] = -e[n - 1] / d[n - 1];
    for j in (1..n - 1).rev() {
        p[j] = (b[j] - e[j] * p[j + 1]) / d[j];
        q[j] = -e[j] * q[j + 1] / d[j];
    }
    let denom = d[0] + e[0] * q[1];
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Singular("cyclic bidiagonal closure".into()));
    }
    let x0 = (b[0] - e[0] * p[1]) / denom;
    let mut x = DVector::zeros(n);
    x[0] = x0;
    for j in 1..n {
        x[j] = p[j] + q[j] * x0;
    }
    Ok(x)
}

/// Outcome of [`lstsq`]: the minimizer and the numerical rank of the design.
#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub x: DMatrix<f64>,
    pub rank: usize,
}

/// Minimum-norm least-squares solution of `A X ≈ B` through a truncated SVD.
/// Singular values below `max(m, n)·ε·σ_max` are treated as zero.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<LstsqSolution> {
    if a.nrows() != b.nrows() {
        return Err(Error::dim("least-squares right-hand side rows", a.nrows(), b.nrows()));
    }
    if a.ncols() == 0 {
        return Ok(LstsqSolution {
            x: DMatrix::zeros(0, b.ncols()),
            rank: 0,
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("least-squares data contains non-finite values".into()));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if smax == 0.0 {
        return Ok(LstsqSolution {
            x: DMatrix::zeros(a.ncols(), b.ncols()),
            rank: 0,
        });
    }
    let x = svd
        .solve(b, tol)
        .map_err(|e| Error::Singular(format!("least squares: {e}")))?;
    Ok(LstsqSolution { x, rank })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn check_against_dense(m: &CyclicBidiagonal, b: &DVector<f64>) {
        let dense = m.to_dense();
        let x = m.solve(b).unwrap();
        let reference = dense.clone().lu().solve(b).unwrap();
        assert_relative_eq!(x, reference, epsilon = 1e-12, max_relative = 1e-10);
        let xt = m.solve_transpose(b).unwrap();
        let reference_t = dense.transpose().lu().solve(b).unwrap();
        assert_relative_eq!(xt, reference_t, epsilon = 1e-12, max_relative = 1e-10);
    }

    #[test]
    fn transpose_matches_dense_transpose() {
        let m = CyclicBidiagonal::new(vec![2.0, 3.0, 4.0], vec![0.1, 0.2, 0.3], Coupling::Next);
        assert_eq!(m.transpose().to_dense(), m.to_dense().transpose());
        let m = CyclicBidiagonal::new(vec![2.0, 3.0, 4.0], vec![0.1, 0.2, 0.3], Coupling::Prev);
        assert_eq!(m.transpose().to_dense(), m.to_dense().transpose());
    }

    #[test]
    fn non_dominant_system_uses_dense_fallback() {
        let m = CyclicBidiagonal::new(vec![1.0, 1.0, 1.0, 1.0], vec![3.0, -2.0, 0.5, 1.5], Coupling::Prev);
        check_against_dense(&m, &DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]));
    }

    #[test]
    fn singular_cyclic_system_reported() {
        // Rows sum to zero: the constant vector is in the kernel.
        let m = CyclicBidiagonal::new(vec![1.0; 3], vec![-1.0; 3], Coupling::Next);
        assert!(m.solve(&DVector::from_vec(vec![1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn lstsq_min_norm_on_rank_deficiency() {
        // Two identical columns: the minimum-norm solution splits evenly.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let b = DMatrix::from_row_slice(3, 1, &[2.0, 4.0, 6.0]);
        let sol = lstsq(&a, &b).unwrap();
        assert_eq!(sol.rank, 1);
        assert_relative_eq!(sol.x[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.x[(1, 0)], 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn cyclic_solve_matches_dense(
            n in 1usize..12,
            next in any::<bool>(),
            vals in proptest::collection::vec(-1.0f64..1.0, 36),
        ) {
            let diag: Vec<f64> = (0..n).map(|j| 2.0 + vals[j]).collect();
            let off: Vec<f64> = (0..n).map(|j| 0.9 * vals[12 + j]).collect();
            let b = DVector::from_fn(n, |j, _| vals[24 + j]);
            let coupling = if next { Coupling::Next } else { Coupling::Prev };
            check_against_dense(&CyclicBidiagonal::new(diag, off, coupling), &b);
        }
    }
}

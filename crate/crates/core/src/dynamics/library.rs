use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polynomial features `θ(v)` of the latent state `v` (optionally `[z; μ]`).
///
/// Degree 1 gives `[1, v₁, …, v_d]`; degree 2 appends `v_i v_j` for `i ≤ j`
/// in lexicographic order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLibrary {
    latent_dim: usize,
    param_dim: usize,
    degree: u8,
}

impl FeatureLibrary {
    pub fn new(latent_dim: usize, degree: u8) -> Result<Self> {
        Self::augmented(latent_dim, 0, degree)
    }

    /// Library acting on `[z; μ]` with `μ ∈ R^{param_dim}`.
    pub fn augmented(latent_dim: usize, param_dim: usize, degree: u8) -> Result<Self> {
        if !(1..=2).contains(&degree) {
            return Err(Error::Config(format!("library degree must be 1 or 2, got {degree}")));
        }
        if latent_dim + param_dim == 0 {
            return Err(Error::Config("library needs at least one input".into()));
        }
        Ok(Self {
            latent_dim,
            param_dim,
            degree,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn is_augmented(&self) -> bool {
        self.param_dim > 0
    }

    pub fn degree(&self) -> u8 {
        self.degree
    }

    /// Acting dimension `d`.
    pub fn dim(&self) -> usize {
        self.latent_dim + self.param_dim
    }

    /// Feature count `J`.
    pub fn n_features(&self) -> usize {
        let d = self.dim();
        match self.degree {
            1 => 1 + d,
            _ => 1 + d + d * (d + 1) / 2,
        }
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::dim("library input", self.dim(), v.len()));
        }
        Ok(())
    }

    /// Writes `θ(v)` into `out` (length `J`).
    pub fn eval_into(&self, v: &[f64], out: &mut [f64]) {
        let d = v.len();
        out[0] = 1.0;
        out[1..=d].copy_from_slice(v);
        if self.degree == 2 {
            let mut k = d + 1;
            for i in 0..d {
                for j in i..d {
                    out[k] = v[i] * v[j];
                    k += 1;
                }
            }
        }
    }

    pub fn eval(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(v.as_slice())?;
        let mut out = DVector::zeros(self.n_features());
        self.eval_into(v.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// `Θ(V)`: one row of features per row of `rows`.
    pub fn eval_rows(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rows.ncols() != self.dim() {
            return Err(Error::dim("library input columns", self.dim(), rows.ncols()));
        }
        let j = self.n_features();
        let mut out = DMatrix::zeros(rows.nrows(), j);
        let mut v = vec![0.0; self.dim()];
        let mut theta = vec![0.0; j];
        for r in 0..rows.nrows() {
            for (c, slot) in v.iter_mut().enumerate() {
                *slot = rows[(r, c)];
            }
            self.eval_into(&v, &mut theta);
            for c in 0..j {
                out[(r, c)] = theta[c];
            }
        }
        Ok(out)
    }

    /// `∇θ(v)`, a `J × d` matrix.
    pub fn jacobian(&self, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(v.as_slice())?;
        let d = self.dim();
        let mut jac = DMatrix::zeros(self.n_features(), d);
        for i in 0..d {
            jac[(1 + i, i)] = 1.0;
        }
        if self.degree == 2 {
            let mut k = d + 1;
            for i in 0..d {
                for j in i..d {
                    jac[(k, i)] += v[j];
                    jac[(k, j)] += v[i];
                    k += 1;
                }
            }
        }
        Ok(jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degree_one_at_origin() {
        let lib = FeatureLibrary::new(3, 1).unwrap();
        assert_eq!(lib.eval(&DVector::zeros(3)).unwrap().as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn degree_two_enumerates_monomials() {
        let lib = FeatureLibrary::new(2, 2).unwrap();
        let theta = lib.eval(&DVector::from_vec(vec![2.0, 3.0])).unwrap();
        assert_eq!(theta.as_slice(), &[1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn feature_counts() {
        assert_eq!(FeatureLibrary::new(15, 1).unwrap().n_features(), 16);
        assert_eq!(FeatureLibrary::augmented(15, 4, 1).unwrap().n_features(), 20);
        assert_eq!(FeatureLibrary::new(4, 2).unwrap().n_features(), 1 + 4 + 10);
        assert!(FeatureLibrary::new(3, 3).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let lib = FeatureLibrary::new(3, 1).unwrap();
        assert!(lib.eval(&DVector::zeros(2)).is_err());
        assert!(lib.jacobian(&DVector::zeros(4)).is_err());
    }

    #[test]
    fn linear_jacobian_is_stacked_identity() {
        let lib = FeatureLibrary::new(3, 1).unwrap();
        let jac = lib.jacobian(&DVector::from_vec(vec![0.4, -1.0, 2.0])).unwrap();
        let mut expected = DMatrix::zeros(4, 3);
        expected.view_mut((1, 0), (3, 3)).fill_with_identity();
        assert_eq!(jac, expected);
    }

    #[test]
    fn quadratic_rows_vanish_at_origin() {
        let lib = FeatureLibrary::new(3, 2).unwrap();
        let jac = lib.jacobian(&DVector::zeros(3)).unwrap();
        assert_eq!(jac.rows(4, 6).amax(), 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let lib = FeatureLibrary::new(2, 2).unwrap();
        let v = DVector::from_vec(vec![0.3, -0.7]);
        let jac = lib.jacobian(&v).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut vp = v.clone();
            vp[i] += h;
            let mut vm = v.clone();
            vm[i] -= h;
            let fd = (lib.eval(&vp).unwrap() - lib.eval(&vm).unwrap()) / (2.0 * h);
            assert!((fd - jac.column(i)).amax() <= 1e-7);
        }
    }

    proptest! {
        #[test]
        fn rows_agree_with_pointwise(vals in proptest::collection::vec(-3.0f64..3.0, 9)) {
            let lib = FeatureLibrary::augmented(2, 1, 2).unwrap();
            let rows = DMatrix::from_row_slice(3, 3, &vals);
            let theta = lib.eval_rows(&rows).unwrap();
            for r in 0..3 {
                let pointwise = lib.eval(&rows.row(r).transpose()).unwrap();
                prop_assert_eq!(theta.row(r).transpose(), pointwise);
            }
        }
    }
}

//! Proper orthogonal decomposition: a linear encoder/decoder pair built from
//! the leading left singular vectors of the transposed snapshot matrix.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::SnapshotMatrix;
use crate::error::{Error, Result};
use crate::io;

/// How many modes to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducerCriterion {
    /// Smallest `k` with `Σ_{j≤k} σ_j² / Σ_j σ_j² ≥ fraction`.
    Energy(f64),
    Fixed(usize),
}

impl Default for ReducerCriterion {
    fn default() -> Self {
        ReducerCriterion::Energy(0.9999)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearReducer {
    basis: DMatrix<f64>,
    mean: Option<DVector<f64>>,
    singular_values: DVector<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReducerMeta {
    latent_dim: usize,
    centered: bool,
    mean: Option<Vec<f64>>,
    singular_values: Vec<f64>,
}

/// Fits a reducer to snapshot rows stacked into one matrix (each row is a
/// full state).
pub fn pod_fit(rows: &DMatrix<f64>, criterion: ReducerCriterion, center: bool) -> Result<LinearReducer> {
    let (m, n) = rows.shape();
    if m == 0 || n == 0 {
        return Err(Error::Domain("cannot fit a reducer to empty data".into()));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("training data contains non-finite values".into()));
    }
    if let ReducerCriterion::Energy(f) = criterion {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("energy fraction must lie in (0, 1], got {f}")));
        }
    }

    let mean = center.then(|| rows.row_mean().transpose());
    let centered;
    let x = match &mean {
        Some(mu) => {
            centered = DMatrix::from_fn(m, n, |i, j| rows[(i, j)] - mu[j]);
            &centered
        }
        None => rows,
    };

    let (modes, sigma2) = if m >= n {
        // Eigenvectors of XᵀX are the left singular vectors of Xᵀ.
        let eig = (x.transpose() * x).symmetric_eigen();
        let order = descending(&eig.eigenvalues);
        let vecs = DMatrix::from_fn(n, order.len(), |i, k| eig.eigenvectors[(i, order[k])]);
        let vals = DVector::from_iterator(order.len(), order.iter().map(|&k| eig.eigenvalues[k].max(0.0)));
        (vecs, vals)
    } else {
        // Method of snapshots: XXᵀ = VΣ²Vᵀ, left vectors span XᵀV.
        let eig = (x * x.transpose()).symmetric_eigen();
        let order = descending(&eig.eigenvalues);
        let v = DMatrix::from_fn(m, order.len(), |i, k| eig.eigenvectors[(i, order[k])]);
        let vals = DVector::from_iterator(order.len(), order.iter().map(|&k| eig.eigenvalues[k].max(0.0)));
        let q = (x.transpose() * v).qr().q();
        (q, vals)
    };

    let total: f64 = sigma2.iter().sum();
    if total == 0.0 {
        return Err(Error::Domain("training data is identically zero".into()));
    }
    let k = match criterion {
        ReducerCriterion::Fixed(k) => {
            if k == 0 || k > m.min(n) {
                return Err(Error::Config(format!(
                    "latent dimension {k} must lie in 1..={}",
                    m.min(n)
                )));
            }
            k
        }
        ReducerCriterion::Energy(fraction) => {
            let mut acc = 0.0;
            let mut k = sigma2.len();
            for (j, s) in sigma2.iter().enumerate() {
                acc += s;
                if acc / total >= fraction - 1e-14 {
                    k = j + 1;
                    break;
                }
            }
            k
        }
    };

    let mut basis = modes.columns(0, k).into_owned();
    for mut col in basis.column_iter_mut() {
        let lead = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if lead < 0.0 {
            col.neg_mut();
        }
    }
    Ok(LinearReducer {
        basis,
        mean,
        singular_values: sigma2.map(f64::sqrt),
    })
}

fn descending(vals: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    order
}

/// Stacks every trajectory's rows and fits a reducer.
pub fn pod_fit_snapshots(
    training: &[SnapshotMatrix],
    criterion: ReducerCriterion,
    center: bool,
) -> Result<LinearReducer> {
    let first = training
        .first()
        .ok_or_else(|| Error::Domain("no training trajectories".into()))?;
    let n = first.state_dim();
    let total: usize = training.iter().map(|s| s.data().nrows()).sum();
    let mut rows = DMatrix::zeros(total, n);
    let mut r = 0;
    for s in training {
        if s.state_dim() != n {
            return Err(Error::dim("training state dimension", n, s.state_dim()));
        }
        rows.rows_mut(r, s.data().nrows()).copy_from(s.data());
        r += s.data().nrows();
    }
    pod_fit(&rows, criterion, center)
}

impl LinearReducer {
    /// Builds a reducer from an explicit orthonormal basis.
    pub fn from_basis(basis: DMatrix<f64>, mean: Option<DVector<f64>>) -> Result<Self> {
        let k = basis.ncols();
        if let Some(m) = &mean {
            if m.len() != basis.nrows() {
                return Err(Error::dim("reducer mean", basis.nrows(), m.len()));
            }
        }
        let gram = basis.transpose() * &basis;
        let err = (gram - DMatrix::identity(k, k)).amax();
        if err > 1e-10 {
            return Err(Error::Domain(format!("basis is not orthonormal (error {err:.2e})")));
        }
        Ok(Self {
            basis,
            mean,
            singular_values: DVector::zeros(0),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn full_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn mean(&self) -> Option<&DVector<f64>> {
        self.mean.as_ref()
    }

    /// All singular values of the fitted data, not only the retained ones.
    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    pub fn encode(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.full_dim() {
            return Err(Error::dim("full state", self.full_dim(), u.len()));
        }
        Ok(match &self.mean {
            Some(m) => self.basis.tr_mul(&(u - m)),
            None => self.basis.tr_mul(u),
        })
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::dim("latent state", self.latent_dim(), z.len()));
        }
        let u = &self.basis * z;
        Ok(match &self.mean {
            Some(m) => u + m,
            None => u,
        })
    }

    /// Encodes each row of `rows` (time × space) into time × latent.
    pub fn encode_rows(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rows.ncols() != self.full_dim() {
            return Err(Error::dim("snapshot columns", self.full_dim(), rows.ncols()));
        }
        let mut z = rows * &self.basis;
        if let Some(m) = &self.mean {
            let shift = self.basis.tr_mul(m).transpose();
            for mut r in z.row_iter_mut() {
                r -= &shift;
            }
        }
        Ok(z)
    }

    /// Decodes each row of `z` (time × latent) into time × space.
    pub fn decode_rows(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::dim("latent columns", self.latent_dim(), z.ncols()));
        }
        let mut u = z * self.basis.transpose();
        if let Some(m) = &self.mean {
            let mt = m.transpose();
            for mut r in u.row_iter_mut() {
                r += &mt;
            }
        }
        Ok(u)
    }

    /// `∇G_de`, constant for a linear decoder.
    pub fn decoder_jacobian(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// `∇G_en = basisᵀ`.
    pub fn encoder_jacobian(&self) -> DMatrix<f64> {
        self.basis.transpose()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_matrix(path, &self.basis)?;
        io::write_sidecar(
            path,
            &ReducerMeta {
                latent_dim: self.latent_dim(),
                centered: self.mean.is_some(),
                mean: self.mean.as_ref().map(|m| m.as_slice().to_vec()),
                singular_values: self.singular_values.as_slice().to_vec(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let basis = io::read_matrix(path)?;
        let meta: ReducerMeta = io::read_sidecar(path)?;
        let bad = |reason: String| Error::Consistency {
            path: path.to_path_buf(),
            reason,
        };
        if meta.latent_dim != basis.ncols() || meta.centered != meta.mean.is_some() {
            return Err(bad(format!(
                "sidecar declares latent_dim {} (centered {}) for a {}x{} basis",
                meta.latent_dim,
                meta.centered,
                basis.nrows(),
                basis.ncols()
            )));
        }
        let mean = meta.mean.map(DVector::from_vec);
        if let Some(m) = &mean {
            if m.len() != basis.nrows() {
                return Err(bad(format!("mean has length {}", m.len())));
            }
        }
        Ok(Self {
            basis,
            mean,
            singular_values: DVector::from_vec(meta.singular_values),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormality_error(r: &LinearReducer) -> f64 {
        let k = r.latent_dim();
        (r.basis().transpose() * r.basis() - DMatrix::identity(k, k)).amax()
    }

    #[test]
    fn rank_one_data_needs_one_mode() {
        let a = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let x = &a * b.transpose();
        let r = pod_fit(&x, ReducerCriterion::Energy(0.9), false).unwrap();
        assert_eq!(r.latent_dim(), 1);
        let back = r.decode_rows(&r.encode_rows(&x).unwrap()).unwrap();
        assert!((back - &x).norm() <= 1e-12 * x.norm());
    }

    #[test]
    fn full_rank_fixed_basis_reconstructs_exactly() {
        let x = random(10, 4, 1);
        let r = pod_fit(&x, ReducerCriterion::Fixed(4), false).unwrap();
        let back = r.decode_rows(&r.encode_rows(&x).unwrap()).unwrap();
        assert!((back - &x).norm() <= 1e-12);
    }

    #[test]
    fn projector_matches_reference_svd_on_both_sides() {
        for (rows, cols) in [(30, 8), (6, 25)] {
            let x = random(rows, cols, 7);
            let k = 4;
            let r = pod_fit(&x, ReducerCriterion::Fixed(k), false).unwrap();
            assert!(orthonormality_error(&r) <= 1e-12);
            let svd = x.transpose().svd(true, false);
            let order = descending(&svd.singular_values);
            let u = svd.u.unwrap();
            let uk = DMatrix::from_fn(cols, k, |i, j| u[(i, order[j])]);
            let reference = &uk * uk.transpose();
            let ours = r.basis() * r.basis().transpose();
            assert!((reference - ours).amax() <= 1e-10, "{rows}x{cols}");
            for j in 0..k {
                assert_relative_eq!(r.singular_values()[j], svd.singular_values[order[j]], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn sign_convention_makes_largest_entry_positive() {
        let r = pod_fit(&random(20, 6, 3), ReducerCriterion::Fixed(3), false).unwrap();
        for col in r.basis().column_iter() {
            let lead = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn centering_enters_encode_and_decode() {
        let x = random(12, 5, 4).add_scalar(3.0);
        let r = pod_fit(&x, ReducerCriterion::Fixed(2), true).unwrap();
        let mean = r.mean().unwrap().clone();
        assert_eq!(r.decode(&DVector::zeros(2)).unwrap(), mean);
        assert!(r.encode(&mean).unwrap().amax() <= 1e-14);
        let rows = r.encode_rows(&x).unwrap();
        let z0 = r.encode(&x.row(0).transpose()).unwrap();
        assert!((rows.row(0).transpose() - z0).amax() <= 1e-13);
    }

    #[test]
    fn empty_or_zero_data_rejected() {
        assert!(pod_fit(&DMatrix::zeros(0, 3), ReducerCriterion::Fixed(1), false).is_err());
        assert!(pod_fit(&DMatrix::zeros(3, 3), ReducerCriterion::Energy(0.9), false).is_err());
        assert!(pod_fit(&random(4, 3, 0), ReducerCriterion::Energy(1.5), false).is_err());
        assert!(pod_fit(&random(4, 3, 0), ReducerCriterion::Fixed(4), false).is_err());
    }

    #[test]
    fn jacobians_are_the_basis() {
        let r = pod_fit(&random(15, 6, 9), ReducerCriterion::Fixed(3), false).unwrap();
        assert_eq!(r.encoder_jacobian().transpose(), *r.decoder_jacobian());
        let col = r.basis().column(1).into_owned();
        let projected = r.decoder_jacobian() * (r.encoder_jacobian() * &col);
        assert!((projected - col).amax() <= 1e-14);
        // Decoding is linear, so a difference quotient reproduces the basis.
        let z = DVector::from_vec(vec![0.3, -0.2, 0.9]);
        for j in 0..3 {
            let mut zp = z.clone();
            zp[j] += 1.0;
            let diff = r.decode(&zp).unwrap() - r.decode(&z).unwrap();
            assert!((diff - r.basis().column(j)).amax() <= 1e-15);
        }
    }

    #[test]
    fn reconstruction_error_monotone_in_latent_dim() {
        let x = random(20, 8, 11);
        let mut last = f64::INFINITY;
        for k in 1..=8 {
            let r = pod_fit(&x, ReducerCriterion::Fixed(k), false).unwrap();
            let err = (r.decode_rows(&r.encode_rows(&x).unwrap()).unwrap() - &x).norm();
            assert!(err <= last + 1e-12);
            last = err;
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.bin");
        let r = pod_fit(&random(12, 5, 2), ReducerCriterion::Fixed(3), true).unwrap();
        r.save(&path).unwrap();
        assert_eq!(LinearReducer::load(&path).unwrap(), r);
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity_on_latents(
            seed in 0u64..1000,
            z in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            let r = pod_fit(&random(9, 7, seed), ReducerCriterion::Fixed(3), seed % 2 == 0).unwrap();
            prop_assert!(orthonormality_error(&r) <= 1e-12);
            let z = DVector::from_vec(z);
            let back = r.encode(&r.decode(&z).unwrap()).unwrap();
            prop_assert!((back - z).amax() <= 1e-12);
        }
    }
}

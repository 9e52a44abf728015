use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::library::FeatureLibrary;
use super::test_functions::TestFunctionBasis;
use crate::data::TimeGrid;
use crate::error::{Error, Result};
use crate::linalg::lstsq;

/// Latent vector field `dv/dt = Wᵀθ(v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiedDynamics {
    /// `J × d` coefficient matrix.
    pub w: DMatrix<f64>,
    pub library: FeatureLibrary,
    /// Numerical rank of the regression matrix.
    pub rank: usize,
    /// `‖B − GW‖_F / ‖B‖_F` on the fitted data (0 when `B = 0`).
    pub relative_residual: f64,
}

/// Weak-form (integrated against test functions) or strong-form
/// (pointwise finite-difference derivatives) regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsForm {
    #[default]
    Weak,
    Strong,
}

/// Everything a fit needs besides the data.
#[derive(Debug, Clone)]
pub enum Identifier {
    Weak(TestFunctionBasis),
    Strong(TimeGrid),
}

impl Identifier {
    pub fn form(&self) -> DynamicsForm {
        match self {
            Identifier::Weak(_) => DynamicsForm::Weak,
            Identifier::Strong(_) => DynamicsForm::Strong,
        }
    }

    pub fn fit(&self, trajectories: &[DMatrix<f64>], lib: &FeatureLibrary) -> Result<IdentifiedDynamics> {
        match self {
            Identifier::Weak(basis) => wendy_fit_stacked(trajectories, lib, basis),
            Identifier::Strong(grid) => sindy_fit_stacked(trajectories, lib, grid),
        }
    }
}

fn check_trajectory(z: &DMatrix<f64>, lib: &FeatureLibrary, rows: usize) -> Result<()> {
    if z.ncols() != lib.dim() {
        return Err(Error::dim("trajectory columns", lib.dim(), z.ncols()));
    }
    if z.nrows() != rows {
        return Err(Error::dim("trajectory rows", rows, z.nrows()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("trajectory contains non-finite values".into()));
    }
    Ok(())
}

fn solve_stacked(blocks: Vec<(DMatrix<f64>, DMatrix<f64>)>, lib: &FeatureLibrary) -> Result<IdentifiedDynamics> {
    let rows: usize = blocks.iter().map(|(g, _)| g.nrows()).sum();
    let j = lib.n_features();
    let d = lib.dim();
    let mut g = DMatrix::zeros(rows, j);
    let mut b = DMatrix::zeros(rows, d);
    let mut r = 0;
    for (gk, bk) in &blocks {
        g.rows_mut(r, gk.nrows()).copy_from(gk);
        b.rows_mut(r, bk.nrows()).copy_from(bk);
        r += gk.nrows();
    }
    let sol = lstsq(&g, &b)?;
    if sol.rank < j {
        log::warn!(
            "dynamics regression is rank deficient ({} of {j}); using the minimum-norm solution",
            sol.rank
        );
    }
    let b_norm = b.norm();
    let relative_residual = if b_norm > 0.0 {
        (&b - &g * &sol.x).norm() / b_norm
    } else {
        0.0
    };
    Ok(IdentifiedDynamics {
        w: sol.x,
        library: *lib,
        rank: sol.rank,
        relative_residual,
    })
}

/// Weak-form blocks `G = Φ·Θ(Z)`, `B = −Φ̇·Z` for one trajectory.
pub fn weak_system(
    z: &DMatrix<f64>,
    lib: &FeatureLibrary,
    basis: &TestFunctionBasis,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_trajectory(z, lib, basis.grid_len())?;
    let theta = lib.eval_rows(z)?;
    Ok((&basis.phi * theta, -(&basis.phi_dot * z)))
}

pub fn wendy_fit(z: &DMatrix<f64>, lib: &FeatureLibrary, basis: &TestFunctionBasis) -> Result<IdentifiedDynamics> {
    wendy_fit_stacked(std::slice::from_ref(z), lib, basis)
}

/// One shared `W` for all trajectories: the weak systems are stacked.
pub fn wendy_fit_stacked(
    trajectories: &[DMatrix<f64>],
    lib: &FeatureLibrary,
    basis: &TestFunctionBasis,
) -> Result<IdentifiedDynamics> {
    if trajectories.is_empty() {
        return Err(Error::Domain("no trajectories to fit".into()));
    }
    let blocks = trajectories
        .par_iter()
        .map(|z| weak_system(z, lib, basis))
        .collect::<Result<Vec<_>>>()?;
    solve_stacked(blocks, lib)
}

/// `Ż` by second-order differences: central inside, one-sided at the ends.
pub fn time_derivative(z: &DMatrix<f64>, grid: &TimeGrid) -> Result<DMatrix<f64>> {
    let rows = z.nrows();
    if rows != grid.len() {
        return Err(Error::dim("trajectory rows", grid.len(), rows));
    }
    if grid.steps() < 2 {
        return Err(Error::Config("strong-form fit needs at least two steps".into()));
    }
    let h2 = 2.0 * grid.dt();
    let last = rows - 1;
    Ok(DMatrix::from_fn(rows, z.ncols(), |n, c| {
        if n == 0 {
            (-3.0 * z[(0, c)] + 4.0 * z[(1, c)] - z[(2, c)]) / h2
        } else if n == last {
            (3.0 * z[(last, c)] - 4.0 * z[(last - 1, c)] + z[(last - 2, c)]) / h2
        } else {
            (z[(n + 1, c)] - z[(n - 1, c)]) / h2
        }
    }))
}

pub fn sindy_fit(z: &DMatrix<f64>, lib: &FeatureLibrary, grid: &TimeGrid) -> Result<IdentifiedDynamics> {
    sindy_fit_stacked(std::slice::from_ref(z), lib, grid)
}

pub fn sindy_fit_stacked(
    trajectories: &[DMatrix<f64>],
    lib: &FeatureLibrary,
    grid: &TimeGrid,
) -> Result<IdentifiedDynamics> {
    if trajectories.is_empty() {
        return Err(Error::Domain("no trajectories to fit".into()));
    }
    let blocks = trajectories
        .par_iter()
        .map(|z| {
            check_trajectory(z, lib, grid.len())?;
            Ok((lib.eval_rows(z)?, time_derivative(z, grid)?))
        })
        .collect::<Result<Vec<_>>>()?;
    solve_stacked(blocks, lib)
}

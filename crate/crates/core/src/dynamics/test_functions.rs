use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::TimeGrid;
use crate::error::{Error, Result};

/// Shape and placement of the compactly supported bumps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionParams {
    pub count: usize,
    pub radius_frac: f64,
    pub degree: u32,
}

impl Default for TestFunctionParams {
    fn default() -> Self {
        Self {
            count: 200,
            radius_frac: 0.1,
            degree: 3,
        }
    }
}

/// Test functions sampled on the time grid with trapezoidal weights folded
/// in: `phi = Φ·Q`, `phi_dot = Φ̇·Q`, `Q = diag(Δt/2, Δt, …, Δt, Δt/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunctionBasis {
    pub phi: DMatrix<f64>,
    pub phi_dot: DMatrix<f64>,
    /// Half-width of each support, in grid points.
    pub radius: usize,
    pub degree: u32,
    /// Centre of each bump, in (fractional) grid-index units.
    pub centers: Vec<f64>,
}

impl TestFunctionBasis {
    pub fn count(&self) -> usize {
        self.phi.nrows()
    }

    pub fn grid_len(&self) -> usize {
        self.phi.ncols()
    }
}

/// `φ_m(t) = (1 − ((t − t_m)/(rΔt))²)^p` on its support, zero outside, with
/// `r = max(2, round(radius_frac·N))` and centres spread evenly (snapped to
/// grid nodes, so each bump is sampled symmetrically) so every
/// support stays inside `[0, T]`. Each row pair is scaled so that the
/// weighted `φ_m` has unit 2-norm.
pub fn build_test_functions(grid: &TimeGrid, params: &TestFunctionParams) -> Result<TestFunctionBasis> {
    let TestFunctionParams {
        count: m,
        radius_frac,
        degree: p,
    } = *params;
    if m == 0 {
        return Err(Error::Config("need at least one test function".into()));
    }
    if p < 2 {
        return Err(Error::Config(format!("test function degree must be >= 2, got {p}")));
    }
    if !(radius_frac.is_finite() && radius_frac > 0.0) {
        return Err(Error::Config(format!("radius fraction must be positive, got {radius_frac}")));
    }
    let steps = grid.steps();
    let radius = ((radius_frac * steps as f64).round() as usize).max(2);
    if 2 * radius > steps {
        return Err(Error::Config(format!(
            "test-function support 2·{radius} exceeds the {steps}-step time interval"
        )));
    }
    let centers: Vec<f64> = if m == 1 {
        vec![(steps / 2) as f64]
    } else {
        let span = (steps - 2 * radius) as f64;
        (0..m)
            .map(|k| (radius as f64 + span * k as f64 / (m - 1) as f64).round())
            .collect()
    };

    let dt = grid.dt();
    let cols = steps + 1;
    let mut phi = DMatrix::zeros(m, cols);
    let mut phi_dot = DMatrix::zeros(m, cols);
    let r = radius as f64;
    let pf = p as f64;
    for (k, &c) in centers.iter().enumerate() {
        let lo = (c - r).ceil().max(0.0) as usize;
        let hi = ((c + r).floor() as usize).min(steps);
        for n in lo..=hi {
            let s = (n as f64 - c) / r;
            let base = 1.0 - s * s;
            if base <= 0.0 {
                continue;
            }
            let w = if n == 0 || n == steps { 0.5 * dt } else { dt };
            phi[(k, n)] = base.powi(p as i32) * w;
            phi_dot[(k, n)] = pf * base.powi(p as i32 - 1) * (-2.0 * s) / (r * dt) * w;
        }
        let norm = phi.row(k).norm();
        if norm > 0.0 {
            phi.row_mut(k).scale_mut(1.0 / norm);
            phi_dot.row_mut(k).scale_mut(1.0 / norm);
        }
    }
    Ok(TestFunctionBasis {
        phi,
        phi_dot,
        radius,
        degree: p,
        centers,
    })
}

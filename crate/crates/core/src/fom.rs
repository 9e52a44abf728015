//! Full-order model: 1-D inviscid Burgers on a periodic grid, backward Euler
//! in time, Newton for each implicit step, and exact discrete gradients of
//! trajectory objectives by the direct and adjoint methods.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{InitialCondition, ParameterVector, SnapshotMatrix, TimeGrid};
use crate::error::{Error, Result};
use crate::linalg::{Coupling, CyclicBidiagonal};
use crate::sensitivity::{GradientMethod, GradientResult, Objective, SolveCounts};

/// One-sided periodic difference used for `∂u/∂x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upwind {
    /// `(u_{j+1} − u_j)/Δx`. Downwind for right-moving waves.
    Forward,
    /// `(u_j − u_{j−1})/Δx`.
    #[default]
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurgersConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub dx: f64,
    pub grid: TimeGrid,
    #[serde(default)]
    pub upwind: Upwind,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for BurgersConfig {
    fn default() -> Self {
        Self::benchmark()
    }
}

impl BurgersConfig {
    /// `x ∈ [−10, 10)`, `Δx = 0.02`, `Δt = 0.001`, `T = 1`.
    pub fn benchmark() -> Self {
        Self {
            x_min: -10.0,
            x_max: 10.0,
            dx: 0.02,
            grid: TimeGrid::new(1.0, 1000).expect("static grid"),
            upwind: Upwind::Backward,
            newton_tol: 1e-10,
            newton_max_iter: 50,
        }
    }

    pub fn with_grid(mut self, grid: TimeGrid) -> Self {
        self.grid = grid;
        self
    }

    pub fn with_upwind(mut self, upwind: Upwind) -> Self {
        self.upwind = upwind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let span = self.x_max - self.x_min;
        if !(self.dx.is_finite() && self.dx > 0.0 && span.is_finite() && span > 0.0) {
            return Err(Error::Config(format!(
                "need x_min < x_max and dx > 0 (got [{}, {}), dx = {})",
                self.x_min, self.x_max, self.dx
            )));
        }
        let cells = span / self.dx;
        if (cells - cells.round()).abs() > 1e-9 * cells.max(1.0) || cells.round() < 1.0 {
            return Err(Error::Config(format!(
                "(x_max - x_min)/dx = {cells} is not an integer"
            )));
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 {
            return Err(Error::Config(
                "newton_tol must be > 0 and newton_max_iter >= 1".into(),
            ));
        }
        // Re-validate in case the grid came straight from a deserializer.
        TimeGrid::new(self.grid.t_final(), self.grid.steps())?;
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        ((self.x_max - self.x_min) / self.dx).round() as usize
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx
    }

    pub fn nodes(&self) -> DVector<f64> {
        DVector::from_fn(self.n_points(), |j, _| self.x(j))
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    /// `D u` for the configured one-sided difference.
    pub fn difference(&self, u: &DVector<f64>) -> DVector<f64> {
        let n = u.len();
        let inv = 1.0 / self.dx;
        let mut out = DVector::zeros(n);
        match self.upwind {
            Upwind::Forward => {
                for j in 0..n {
                    out[j] = (u[(j + 1) % n] - u[j]) * inv;
                }
            }
            Upwind::Backward => {
                for j in 0..n {
                    out[j] = (u[j] - u[(j + n - 1) % n]) * inv;
                }
            }
        }
        out
    }

    /// The dense difference matrix `D` (for tests and diagnostics).
    pub fn difference_matrix(&self) -> DMatrix<f64> {
        let n = self.n_points();
        let mut d = DMatrix::zeros(n, n);
        let inv = 1.0 / self.dx;
        for j in 0..n {
            match self.upwind {
                Upwind::Forward => {
                    d[(j, j)] -= inv;
                    d[(j, (j + 1) % n)] += inv;
                }
                Upwind::Backward => {
                    d[(j, j)] += inv;
                    d[(j, (j + n - 1) % n)] -= inv;
                }
            }
        }
        d
    }
}

fn check_burgers_mu(mu: &ParameterVector) -> Result<()> {
    if mu.len() != 4 {
        return Err(Error::dim("Burgers parameter vector", 4, mu.len()));
    }
    if !(mu[1] > 0.0 && mu[3] > 0.0) {
        return Err(Error::Domain(format!(
            "pulse widths must be positive, got w1 = {}, w2 = {}",
            mu[1], mu[3]
        )));
    }
    Ok(())
}

/// `g(x; μ) = a₁·exp(−(x−5)²/(2w₁²)) + a₂·exp(−(x+5)²/(2w₂²))` at a single point.
pub fn initial_profile(mu: &ParameterVector, x: f64) -> Result<f64> {
    check_burgers_mu(mu)?;
    Ok(pulse(mu[0], mu[1], x - 5.0) + pulse(mu[2], mu[3], x + 5.0))
}

fn pulse(a: f64, w: f64, s: f64) -> f64 {
    a * (-(s * s) / (2.0 * w * w)).exp()
}

pub fn initial_condition(mu: &ParameterVector, cfg: &BurgersConfig) -> Result<DVector<f64>> {
    check_burgers_mu(mu)?;
    Ok(DVector::from_fn(cfg.n_points(), |j, _| {
        let x = cfg.x(j);
        pulse(mu[0], mu[1], x - 5.0) + pulse(mu[2], mu[3], x + 5.0)
    }))
}

/// `∂g/∂μ_i` for `μ = [a₁, w₁, a₂, w₂]`.
pub fn initial_condition_gradient(
    mu: &ParameterVector,
    i: usize,
    cfg: &BurgersConfig,
) -> Result<DVector<f64>> {
    check_burgers_mu(mu)?;
    if i >= 4 {
        return Err(Error::Domain(format!("parameter index {i} out of range 0..4")));
    }
    let (center, a, w) = if i < 2 {
        (5.0, mu[0], mu[1])
    } else {
        (-5.0, mu[2], mu[3])
    };
    Ok(DVector::from_fn(cfg.n_points(), |j, _| {
        let s = cfg.x(j) - center;
        let bump = (-(s * s) / (2.0 * w * w)).exp();
        if i % 2 == 0 {
            bump
        } else {
            a * s * s / (w * w * w) * bump
        }
    }))
}

impl InitialCondition for BurgersConfig {
    fn param_dim(&self) -> usize {
        4
    }

    fn state_dim(&self) -> usize {
        self.n_points()
    }

    fn eval(&self, mu: &ParameterVector) -> Result<DVector<f64>> {
        initial_condition(mu, self)
    }

    fn gradient(&self, mu: &ParameterVector, i: usize) -> Result<DVector<f64>> {
        initial_condition_gradient(mu, i, self)
    }
}

/// `r_n = u_n − u_{n−1} + Δt·u_n ⊙ (D u_n)`.
pub fn step_residual(u: &DVector<f64>, u_prev: &DVector<f64>, cfg: &BurgersConfig) -> DVector<f64> {
    let du = cfg.difference(u);
    let dt = cfg.dt();
    DVector::from_fn(u.len(), |j, _| u[j] - u_prev[j] + dt * u[j] * du[j])
}

/// `∂r_n/∂u_n = I + Δt·(diag(D u) + diag(u)·D)`, stored in its cyclic
/// bidiagonal form.
pub fn step_jacobian(u: &DVector<f64>, cfg: &BurgersConfig) -> CyclicBidiagonal {
    let n = u.len();
    let du = cfg.difference(u);
    let dt = cfg.dt();
    let c = dt / cfg.dx;
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n];
    match cfg.upwind {
        Upwind::Forward => {
            for j in 0..n {
                diag[j] = 1.0 + dt * du[j] - c * u[j];
                off[j] = c * u[j];
            }
            CyclicBidiagonal::new(diag, off, Coupling::Next)
        }
        Upwind::Backward => {
            for j in 0..n {
                diag[j] = 1.0 + dt * du[j] + c * u[j];
                off[j] = -c * u[j];
            }
            CyclicBidiagonal::new(diag, off, Coupling::Prev)
        }
    }
}

/// Jacobians of one step residual: `current = ∂r_n/∂u_n`, and
/// `∂r_n/∂u_{n−1} = previous·I` with `previous = −1` for backward Euler.
#[derive(Debug, Clone)]
pub struct StepJacobians {
    pub current: CyclicBidiagonal,
    pub previous: f64,
}

impl StepJacobians {
    pub fn previous_dense(&self) -> DMatrix<f64> {
        DMatrix::identity(self.current.dim(), self.current.dim()) * self.previous
    }
}

pub fn fom_step_jacobians(
    u_prev: &DVector<f64>,
    u_next: &DVector<f64>,
    cfg: &BurgersConfig,
) -> Result<StepJacobians> {
    if u_prev.len() != u_next.len() {
        return Err(Error::dim("state length", u_prev.len(), u_next.len()));
    }
    Ok(StepJacobians {
        current: step_jacobian(u_next, cfg),
        previous: -1.0,
    })
}

fn newton_step(u_prev: &DVector<f64>, cfg: &BurgersConfig, step: usize) -> Result<DVector<f64>> {
    let mut u = u_prev.clone();
    let mut res_norm = f64::INFINITY;
    for _ in 0..=cfg.newton_max_iter {
        let r = step_residual(&u, u_prev, cfg);
        res_norm = r.amax();
        if !res_norm.is_finite() {
            break;
        }
        if res_norm <= cfg.newton_tol {
            return Ok(u);
        }
        let delta = step_jacobian(&u, cfg).solve(&r)?;
        u -= delta;
    }
    Err(Error::NewtonDivergence {
        step,
        iterations: cfg.newton_max_iter,
        residual: res_norm,
    })
}

/// Solves one implicit step from `u_prev`.
pub fn fom_step(u_prev: &DVector<f64>, cfg: &BurgersConfig) -> Result<DVector<f64>> {
    if u_prev.len() != cfg.n_points() {
        return Err(Error::dim("state length", cfg.n_points(), u_prev.len()));
    }
    if u_prev.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("previous state contains non-finite values".into()));
    }
    newton_step(u_prev, cfg, 1)
}

/// Solves the trajectory from an explicit initial state.
pub fn fom_solve_from(u0: DVector<f64>, cfg: &BurgersConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let n = cfg.n_points();
    if u0.len() != n {
        return Err(Error::dim("initial state length", n, u0.len()));
    }
    let steps = cfg.grid.steps();
    let mut data = DMatrix::zeros(steps + 1, n);
    data.row_mut(0).copy_from(&u0.transpose());
    let mut u = u0;
    for step in 1..=steps {
        u = newton_step(&u, cfg, step)?;
        data.row_mut(step).copy_from(&u.transpose());
    }
    Ok(data)
}

pub fn fom_solve(mu: &ParameterVector, cfg: &BurgersConfig) -> Result<SnapshotMatrix> {
    let data = fom_solve_from(initial_condition(mu, cfg)?, cfg)?;
    SnapshotMatrix::new(data, cfg.grid, Some(mu.clone()))
}

fn row(data: &DMatrix<f64>, n: usize) -> DVector<f64> {
    data.row(n).transpose()
}

fn objective_inputs(
    data: &DMatrix<f64>,
    objective: &dyn Objective,
    steps: usize,
) -> Result<(Vec<usize>, Vec<DVector<f64>>)> {
    let levels = objective.levels(steps);
    if let Some(&bad) = levels.iter().find(|&&l| l > steps) {
        return Err(Error::Domain(format!("objective reads level {bad} > {steps}")));
    }
    let states = levels.iter().map(|&l| row(data, l)).collect();
    Ok((levels, states))
}

/// Exact gradient of `objective` through the full-order trajectory by the
/// adjoint recursion: one transposed solve per time level.
pub fn fom_gradient_adjoint(
    mu: &ParameterVector,
    cfg: &BurgersConfig,
    objective: &dyn Objective,
) -> Result<GradientResult> {
    let traj = fom_solve(mu, cfg)?;
    let data = traj.data();
    let steps = cfg.grid.steps();
    let (levels, states) = objective_inputs(data, objective, steps)?;
    let value = objective.value(&states, mu)?;
    let dfdu = objective.state_gradients(&states, mu)?;
    let mut gradient = objective.param_gradient(&states, mu)?;
    let mut counts = SolveCounts {
        residual_solves: steps + 1,
        linear_solves: 0,
    };

    let n_u = cfg.n_points();
    let forcing = |n: usize| -> DVector<f64> {
        let mut f = DVector::zeros(n_u);
        for (k, &l) in levels.iter().enumerate() {
            if l == n {
                f += &dfdu[k];
            }
        }
        f
    };

    // J_nᵀ λ_n = (∂f/∂u_n)ᵀ − (∂r_{n+1}/∂u_n)ᵀ λ_{n+1}, with ∂r_{n+1}/∂u_n = −I.
    let mut lambda = step_jacobian(&row(data, steps), cfg).solve_transpose(&forcing(steps))?;
    counts.linear_solves += 1;
    for n in (1..steps).rev() {
        let rhs = forcing(n) + &lambda;
        lambda = step_jacobian(&row(data, n), cfg).solve_transpose(&rhs)?;
        counts.linear_solves += 1;
    }
    // r_0 = u_0 − g(μ): ∂r_0/∂u_0 = I.
    lambda = forcing(0) + &lambda;
    counts.linear_solves += 1;

    // df/dμ_i = ∂f/∂μ_i − Σ λ_nᵀ ∂r_n/∂μ_i, only r_0 depends on μ.
    for i in 0..mu.len() {
        gradient[i] += lambda.dot(&initial_condition_gradient(mu, i, cfg)?);
    }
    Ok(GradientResult {
        value,
        gradient,
        method: GradientMethod::FomAdjoint,
        cost: counts,
    })
}

/// Exact gradient by forward propagation of `∂u_n/∂μ_i`: one solve per
/// parameter per time level.
pub fn fom_gradient_direct(
    mu: &ParameterVector,
    cfg: &BurgersConfig,
    objective: &dyn Objective,
) -> Result<GradientResult> {
    let traj = fom_solve(mu, cfg)?;
    let data = traj.data();
    let steps = cfg.grid.steps();
    let (levels, states) = objective_inputs(data, objective, steps)?;
    let value = objective.value(&states, mu)?;
    let dfdu = objective.state_gradients(&states, mu)?;
    let mut gradient = objective.param_gradient(&states, mu)?;
    let n_d = mu.len();
    let mut counts = SolveCounts {
        residual_solves: steps + 1,
        linear_solves: n_d,
    };

    let mut sens: Vec<DVector<f64>> = (0..n_d)
        .map(|i| initial_condition_gradient(mu, i, cfg))
        .collect::<Result<_>>()?;
    let accumulate = |n: usize, sens: &[DVector<f64>], gradient: &mut DVector<f64>| {
        for (k, &l) in levels.iter().enumerate() {
            if l == n {
                for i in 0..n_d {
                    gradient[i] += dfdu[k].dot(&sens[i]);
                }
            }
        }
    };
    accumulate(0, &sens, &mut gradient);
    for n in 1..=steps {
        let jac = step_jacobian(&row(data, n), cfg);
        for s in sens.iter_mut() {
            *s = jac.solve(s)?;
        }
        counts.linear_solves += n_d;
        accumulate(n, &sens, &mut gradient);
    }
    Ok(GradientResult {
        value,
        gradient,
        method: GradientMethod::FomDirect,
        cost: counts,
    })
}

/// Objective value of the full-order trajectory at `μ`.
pub fn fom_objective(
    mu: &ParameterVector,
    cfg: &BurgersConfig,
    objective: &dyn Objective,
) -> Result<f64> {
    let traj = fom_solve(mu, cfg)?;
    let (_, states) = objective_inputs(traj.data(), objective, cfg.grid.steps())?;
    objective.value(&states, mu)
}

//! Latent-space prediction: explicit Runge–Kutta integration of
//! `dv/dt = W(μ)ᵀθ(v)`, decoding back to full states, and the partial
//! derivatives of the latent residuals needed by the sensitivity recursions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coeff::CoefficientProvider;
use crate::data::{InitialCondition, ParameterVector, SnapshotMatrix, TimeGrid};
use crate::dynamics::FeatureLibrary;
use crate::error::{Error, Result};
use crate::pod::LinearReducer;

/// Explicit Runge–Kutta scheme: strictly lower-triangular `a`, weights `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl ButcherTableau {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        let s = b.len();
        if s == 0 || a.len() != s || a.iter().any(|row| row.len() != s) {
            return Err(Error::Config("tableau must be s×s with s weights".into()));
        }
        for (j, row) in a.iter().enumerate() {
            if row[j..].iter().any(|v| *v != 0.0) {
                return Err(Error::Config("tableau is not explicit".into()));
            }
        }
        if (b.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config("tableau weights must sum to one".into()));
        }
        Ok(Self { a, b })
    }

    pub fn euler() -> Self {
        Self::new(vec![vec![0.0]], vec![1.0]).expect("static tableau")
    }

    pub fn heun() -> Self {
        Self::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![0.5, 0.5]).expect("static tableau")
    }

    pub fn rk4() -> Self {
        Self::new(
            vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.5, 0.0, 0.0, 0.0],
                vec![0.0, 0.5, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        )
        .expect("static tableau")
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self, j: usize, i: usize) -> f64 {
        self.a[j][i]
    }

    pub fn b(&self, j: usize) -> f64 {
        self.b[j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Heun,
    #[default]
    Rk4,
}

impl Integrator {
    pub fn tableau(&self) -> ButcherTableau {
        match self {
            Integrator::Euler => ButcherTableau::euler(),
            Integrator::Heun => ButcherTableau::heun(),
            Integrator::Rk4 => ButcherTableau::rk4(),
        }
    }
}

/// Stage arguments `y_j` and stage values `k_j` of one step.
#[derive(Debug, Clone)]
pub struct StageCache {
    pub y: Vec<DVector<f64>>,
    pub k: Vec<DVector<f64>>,
}

/// Derivatives of every stage value with respect to the step's input state
/// and to each parameter.
#[derive(Debug, Clone)]
pub struct StageDerivatives {
    pub dk_dz: Vec<DMatrix<f64>>,
    /// `dk_dmu[j][i] = ∂k_j/∂μ_i`.
    pub dk_dmu: Vec<Vec<DVector<f64>>>,
}

/// `∂r̃_n/∂z_n` (always `I`), `∂r̃_n/∂z_{n−1}`, and `∂r̃_n/∂μ_i`.
#[derive(Debug, Clone)]
pub struct ResidualPartials {
    pub d_current: DMatrix<f64>,
    pub d_previous: DMatrix<f64>,
    pub d_mu: Vec<DVector<f64>>,
}

/// `θ` evaluation and `Wᵀθ` product with reusable scratch space.
fn field(lib: &FeatureLibrary, w: &DMatrix<f64>, v: &DVector<f64>, theta: &mut DVector<f64>) -> DVector<f64> {
    lib.eval_into(v.as_slice(), theta.as_mut_slice());
    w.tr_mul(theta)
}

/// One explicit RK step `v ↦ v + Δt Σ_j b_j k_j`.
pub fn rk_step(
    tableau: &ButcherTableau,
    lib: &FeatureLibrary,
    w: &DMatrix<f64>,
    v: &DVector<f64>,
    dt: f64,
) -> (DVector<f64>, StageCache) {
    let s = tableau.stages();
    let mut theta = DVector::zeros(lib.n_features());
    let mut ys = Vec::with_capacity(s);
    let mut ks: Vec<DVector<f64>> = Vec::with_capacity(s);
    for j in 0..s {
        let mut y = v.clone();
        for (i, k) in ks.iter().enumerate() {
            let a = tableau.a(j, i);
            if a != 0.0 {
                y.axpy(dt * a, k, 1.0);
            }
        }
        ks.push(field(lib, w, &y, &mut theta));
        ys.push(y);
    }
    let next = v + increment(tableau, &ks) * dt;
    (next, StageCache { y: ys, k: ks })
}

fn increment(tableau: &ButcherTableau, ks: &[DVector<f64>]) -> DVector<f64> {
    let mut inc = DVector::zeros(ks[0].len());
    for (j, k) in ks.iter().enumerate() {
        inc.axpy(tableau.b(j), k, 1.0);
    }
    inc
}

/// Recursions for `∂k_j/∂z` and `∂k_j/∂μ_i`. `dw` holds `∂W/∂μ_i` for each
/// parameter, or is empty when the provider is parameter-free (in which case
/// `n_params` zero vectors are returned per stage).
pub fn stage_derivatives(
    tableau: &ButcherTableau,
    lib: &FeatureLibrary,
    w: &DMatrix<f64>,
    dw: &[DMatrix<f64>],
    n_params: usize,
    cache: &StageCache,
    dt: f64,
) -> Result<StageDerivatives> {
    let s = tableau.stages();
    let d = lib.dim();
    let mut dk_dz: Vec<DMatrix<f64>> = Vec::with_capacity(s);
    let mut dk_dmu: Vec<Vec<DVector<f64>>> = Vec::with_capacity(s);
    let mut theta = DVector::zeros(lib.n_features());
    for j in 0..s {
        let y = &cache.y[j];
        let wt_grad = w.tr_mul(&lib.jacobian(y)?);
        // dy_j/dz = I + Δt Σ a_ji ∂k_i/∂z.
        let mut dy = DMatrix::identity(d, d);
        for (i, dk) in dk_dz.iter().enumerate() {
            let a = tableau.a(j, i);
            if a != 0.0 {
                dy += dk * (dt * a);
            }
        }
        dk_dz.push(&wt_grad * dy);

        let mut per_param = Vec::with_capacity(n_params);
        if dw.is_empty() {
            per_param.resize(n_params, DVector::zeros(d));
        } else {
            lib.eval_into(y.as_slice(), theta.as_mut_slice());
            for (p, dwp) in dw.iter().enumerate() {
                let mut dy_mu = DVector::zeros(d);
                for (i, prev) in dk_dmu.iter().enumerate() {
                    let a = tableau.a(j, i);
                    if a != 0.0 {
                        dy_mu.axpy(dt * a, &prev[p], 1.0);
                    }
                }
                per_param.push(dwp.tr_mul(&theta) + &wt_grad * dy_mu);
            }
        }
        dk_dmu.push(per_param);
    }
    Ok(StageDerivatives { dk_dz, dk_dmu })
}

/// Partials of `r̃_n = z_n − z_{n−1} − Δt Σ b_j k_j(z_{n−1})`.
pub fn residual_partials(
    tableau: &ButcherTableau,
    derivs: &StageDerivatives,
    dt: f64,
) -> ResidualPartials {
    let d = derivs.dk_dz[0].nrows();
    let mut d_previous = -DMatrix::identity(d, d);
    for (j, dk) in derivs.dk_dz.iter().enumerate() {
        d_previous -= dk * (dt * tableau.b(j));
    }
    let n_params = derivs.dk_dmu[0].len();
    let d_mu = (0..n_params)
        .map(|p| {
            let mut out = DVector::zeros(d);
            for (j, stage) in derivs.dk_dmu.iter().enumerate() {
                out.axpy(-dt * tableau.b(j), &stage[p], 1.0);
            }
            out
        })
        .collect();
    ResidualPartials {
        d_current: DMatrix::identity(d, d),
        d_previous,
        d_mu,
    }
}

/// Encoder, identified latent vector field, integrator, and decoder bundled
/// into a surrogate for the full-order trajectory.
#[derive(Clone)]
pub struct LatentModel {
    reducer: LinearReducer,
    library: FeatureLibrary,
    provider: CoefficientProvider,
    tableau: ButcherTableau,
    grid: TimeGrid,
    initial: Arc<dyn InitialCondition>,
}

impl fmt::Debug for LatentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LatentModel")
            .field("latent_dim", &self.reducer.latent_dim())
            .field("library", &self.library)
            .field("provider", &self.provider.kind())
            .field("stages", &self.tableau.stages())
            .field("grid", &self.grid)
            .finish()
    }
}

/// Latent initial state and its parameter partials.
#[derive(Debug, Clone)]
pub struct LatentInitial {
    pub v0: DVector<f64>,
    /// `∂v₀/∂μ_i` (the μ-block is `e_i` for augmented models).
    pub partials: Vec<DVector<f64>>,
}

/// Blow-up threshold relative to `max(‖v₀‖∞, 1)`.
const BLOW_UP_FACTOR: f64 = 1e6;

impl LatentModel {
    pub fn new(
        reducer: LinearReducer,
        library: FeatureLibrary,
        provider: CoefficientProvider,
        tableau: ButcherTableau,
        grid: TimeGrid,
        initial: Arc<dyn InitialCondition>,
    ) -> Result<Self> {
        if library.latent_dim() != reducer.latent_dim() {
            return Err(Error::dim("library latent dimension", reducer.latent_dim(), library.latent_dim()));
        }
        let expected = (library.n_features(), library.dim());
        if provider.shape() != expected {
            return Err(Error::Config(format!(
                "provider yields {:?} coefficients, library needs {:?}",
                provider.shape(),
                expected
            )));
        }
        if library.is_augmented() {
            match &provider {
                CoefficientProvider::Implicit { param_dim, .. } if *param_dim == library.param_dim() => {}
                _ => {
                    return Err(Error::Config(
                        "an augmented library requires the implicit provider".into(),
                    ))
                }
            }
            if library.param_dim() != initial.param_dim() {
                return Err(Error::dim("augmented parameter block", initial.param_dim(), library.param_dim()));
            }
        }
        if let Some(p) = provider.param_dim() {
            if p != initial.param_dim() {
                return Err(Error::dim("provider parameter dimension", initial.param_dim(), p));
            }
        }
        if initial.state_dim() != reducer.full_dim() {
            return Err(Error::dim("initial condition length", reducer.full_dim(), initial.state_dim()));
        }
        Ok(Self {
            reducer,
            library,
            provider,
            tableau,
            grid,
            initial,
        })
    }

    pub fn reducer(&self) -> &LinearReducer {
        &self.reducer
    }

    pub fn library(&self) -> &FeatureLibrary {
        &self.library
    }

    pub fn provider(&self) -> &CoefficientProvider {
        &self.provider
    }

    pub fn tableau(&self) -> &ButcherTableau {
        &self.tableau
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn initial(&self) -> &Arc<dyn InitialCondition> {
        &self.initial
    }

    pub fn param_dim(&self) -> usize {
        self.initial.param_dim()
    }

    /// Dimension of the integrated state (`N_z`, plus `N_D` when augmented).
    pub fn state_dim(&self) -> usize {
        self.library.dim()
    }

    fn check_mu(&self, mu: &ParameterVector) -> Result<()> {
        if mu.len() != self.param_dim() {
            return Err(Error::dim("parameter vector", self.param_dim(), mu.len()));
        }
        Ok(())
    }

    fn augment(&self, z: DVector<f64>, mu: &ParameterVector) -> DVector<f64> {
        if !self.library.is_augmented() {
            return z;
        }
        let nz = z.len();
        DVector::from_fn(nz + mu.len(), |r, _| if r < nz { z[r] } else { mu[r - nz] })
    }

    pub fn latent_initial_state(&self, mu: &ParameterVector) -> Result<DVector<f64>> {
        self.check_mu(mu)?;
        let z0 = self.reducer.encode(&self.initial.eval(mu)?)?;
        Ok(self.augment(z0, mu))
    }

    pub fn latent_initial(&self, mu: &ParameterVector) -> Result<LatentInitial> {
        let v0 = self.latent_initial_state(mu)?;
        let nz = self.reducer.latent_dim();
        let partials = (0..mu.len())
            .map(|i| {
                let dz = self.reducer.encoder_jacobian() * self.initial.gradient(mu, i)?;
                let mut dv = DVector::zeros(self.state_dim());
                dv.rows_mut(0, nz).copy_from(&dz);
                if self.library.is_augmented() {
                    dv[nz + i] = 1.0;
                }
                Ok(dv)
            })
            .collect::<Result<_>>()?;
        Ok(LatentInitial { v0, partials })
    }

    pub fn coefficients(&self, mu: &ParameterVector) -> Result<DMatrix<f64>> {
        self.check_mu(mu)?;
        self.provider.eval(mu)
    }

    /// `∂W/∂μ_i` for every `i`, or an empty list for parameter-free providers.
    pub fn coefficient_gradients(&self, mu: &ParameterVector) -> Result<Vec<DMatrix<f64>>> {
        if self.provider.is_parameter_free() {
            return Ok(Vec::new());
        }
        (0..mu.len()).map(|i| self.provider.gradient(mu, i)).collect()
    }

    pub fn step(&self, w: &DMatrix<f64>, v: &DVector<f64>) -> (DVector<f64>, StageCache) {
        rk_step(&self.tableau, &self.library, w, v, self.grid.dt())
    }

    /// Integrates from an explicit latent initial state with fixed `W`.
    pub fn integrate_from(&self, w: &DMatrix<f64>, v0: DVector<f64>) -> Result<DMatrix<f64>> {
        let d = self.state_dim();
        if v0.len() != d {
            return Err(Error::dim("latent initial state", d, v0.len()));
        }
        let steps = self.grid.steps();
        let limit = BLOW_UP_FACTOR * v0.amax().max(1.0);
        let mut out = DMatrix::zeros(steps + 1, d);
        out.row_mut(0).copy_from(&v0.transpose());
        let dt = self.grid.dt();
        let mut v = v0;
        let mut theta = DVector::zeros(self.library.n_features());
        let s = self.tableau.stages();
        let mut ks: Vec<DVector<f64>> = Vec::with_capacity(s);
        for n in 1..=steps {
            ks.clear();
            for j in 0..s {
                let mut y = v.clone();
                for (i, k) in ks.iter().enumerate() {
                    let a = self.tableau.a(j, i);
                    if a != 0.0 {
                        y.axpy(dt * a, k, 1.0);
                    }
                }
                ks.push(field(&self.library, w, &y, &mut theta));
            }
            v = &v + increment(&self.tableau, &ks) * dt;
            let norm = v.amax();
            if !norm.is_finite() || norm > limit {
                return Err(Error::BlowUp { step: n, norm });
            }
            out.row_mut(n).copy_from(&v.transpose());
        }
        Ok(out)
    }

    pub fn integrate_latent(&self, mu: &ParameterVector) -> Result<DMatrix<f64>> {
        let w = self.coefficients(mu)?;
        self.integrate_from(&w, self.latent_initial_state(mu)?)
    }

    /// Full state from a latent row (only the `z` block is decoded).
    pub fn decode_state(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let nz = self.reducer.latent_dim();
        self.reducer.decode(&v.rows(0, nz).into_owned())
    }

    pub fn decode_trajectory(&self, latents: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let nz = self.reducer.latent_dim();
        self.reducer.decode_rows(&latents.columns(0, nz).into_owned())
    }

    pub fn predict_full(&self, mu: &ParameterVector) -> Result<SnapshotMatrix> {
        let latents = self.integrate_latent(mu)?;
        SnapshotMatrix::new(self.decode_trajectory(&latents)?, self.grid, Some(mu.clone()))
    }

    /// `r̃_n = v_n − v_{n−1} − Δt Σ b_j k_j(v_{n−1})`.
    pub fn residual(&self, w: &DMatrix<f64>, v_next: &DVector<f64>, v_prev: &DVector<f64>) -> DVector<f64> {
        let (stepped, _) = self.step(w, v_prev);
        v_next - stepped
    }

    /// `r̃₀ = v₀ − [G_en(g(μ)); μ]`.
    pub fn initial_residual(&self, v0: &DVector<f64>, mu: &ParameterVector) -> Result<DVector<f64>> {
        Ok(v0 - self.latent_initial_state(mu)?)
    }

    pub fn stage_derivatives(
        &self,
        w: &DMatrix<f64>,
        dw: &[DMatrix<f64>],
        cache: &StageCache,
    ) -> Result<StageDerivatives> {
        stage_derivatives(&self.tableau, &self.library, w, dw, self.param_dim(), cache, self.grid.dt())
    }

    /// Partials of `r̃_n` for the step leaving `v_prev`.
    pub fn residual_partials(
        &self,
        w: &DMatrix<f64>,
        dw: &[DMatrix<f64>],
        v_prev: &DVector<f64>,
    ) -> Result<ResidualPartials> {
        let (_, cache) = self.step(w, v_prev);
        let derivs = self.stage_derivatives(w, dw, &cache)?;
        Ok(residual_partials(&self.tableau, &derivs, self.grid.dt()))
    }

    /// Partials of `r̃₀`: `∂r̃₀/∂v₀ = I`, `∂r̃₀/∂μ_i = −∂v₀/∂μ_i`.
    pub fn initial_residual_partials(&self, mu: &ParameterVector) -> Result<ResidualPartials> {
        let init = self.latent_initial(mu)?;
        let d = self.state_dim();
        Ok(ResidualPartials {
            d_current: DMatrix::identity(d, d),
            d_previous: DMatrix::zeros(d, d),
            d_mu: init.partials.into_iter().map(|p| -p).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::CoefficientProvider;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_w(j: usize, d: usize, seed: u64, scale: f64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(j, d, |_, _| scale * rng.random_range(-1.0..1.0))
    }

    /// `dz/dt = Az` as a degree-1 coefficient matrix `[0; Aᵀ]`.
    fn linear_w(a: &DMatrix<f64>) -> DMatrix<f64> {
        let d = a.nrows();
        let mut w = DMatrix::zeros(d + 1, d);
        w.view_mut((1, 0), (d, d)).copy_from(&a.transpose());
        w
    }

    #[test]
    fn tableaux_validate() {
        assert_eq!(ButcherTableau::rk4().stages(), 4);
        assert!(ButcherTableau::new(vec![vec![1.0]], vec![1.0]).is_err());
        assert!(ButcherTableau::new(vec![vec![0.0]], vec![0.5]).is_err());
    }

    #[test]
    fn frozen_dynamics_leave_state_unchanged() {
        let lib = FeatureLibrary::new(3, 2).unwrap();
        let w = DMatrix::zeros(lib.n_features(), 3);
        let v = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let (next, _) = rk_step(&ButcherTableau::rk4(), &lib, &w, &v, 0.1);
        assert_eq!(next, v);
    }

    #[test]
    fn rk4_single_step_on_decay() {
        let lib = FeatureLibrary::new(1, 1).unwrap();
        let w = DMatrix::from_column_slice(2, 1, &[0.0, -1.0]);
        let (next, _) = rk_step(&ButcherTableau::rk4(), &lib, &w, &DVector::from_element(1, 1.0), 0.1);
        let h: f64 = 0.1;
        let poly = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert_relative_eq!(next[0], poly, epsilon = 1e-15);
        assert_relative_eq!(next[0], 0.9048375, epsilon = 1e-7);
    }

    fn integrate_linear(a: &DMatrix<f64>, z0: &DVector<f64>, steps: usize, tab: &ButcherTableau) -> DVector<f64> {
        let lib = FeatureLibrary::new(a.nrows(), 1).unwrap();
        let w = linear_w(a);
        let dt = 1.0 / steps as f64;
        let mut z = z0.clone();
        for _ in 0..steps {
            z = rk_step(tab, &lib, &w, &z, dt).0;
        }
        z
    }

    /// `exp(A)` by scaling and squaring a Taylor series: independent of RK.
    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let scaled = a / 1024.0;
        let mut term = DMatrix::identity(n, n);
        let mut sum = DMatrix::identity(n, n);
        for k in 1..30 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..10 {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, -2.0, -1.0, 0.5, 0.0, -0.5, -3.0]);
        let z0 = DVector::from_vec(vec![1.0, 0.5, -1.0]);
        let exact = expm(&a) * &z0;
        let errs: Vec<f64> = [10, 20, 40, 80]
            .iter()
            .map(|&n| (integrate_linear(&a, &z0, n, &ButcherTableau::rk4()) - &exact).norm())
            .collect();
        for pair in errs.windows(2) {
            let order = (pair[0] / pair[1]).log2();
            assert!((order - 4.0).abs() <= 0.3, "order {order}, errors {errs:?}");
        }
        let heun: Vec<f64> = [20, 40]
            .iter()
            .map(|&n| (integrate_linear(&a, &z0, n, &ButcherTableau::heun()) - &exact).norm())
            .collect();
        assert!(((heun[0] / heun[1]).log2() - 2.0).abs() <= 0.3);
    }

    fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, v: &DVector<f64>) -> DMatrix<f64> {
        let h = 1e-6;
        let cols: Vec<DVector<f64>> = (0..v.len())
            .map(|i| {
                let mut p = v.clone();
                p[i] += h;
                let mut m = v.clone();
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect();
        DMatrix::from_columns(&cols)
    }

    #[test]
    fn stage_and_residual_partials_match_finite_differences() {
        let lib = FeatureLibrary::new(3, 2).unwrap();
        let w = random_w(lib.n_features(), 3, 4, 0.5);
        let dw = vec![random_w(lib.n_features(), 3, 5, 0.5), random_w(lib.n_features(), 3, 6, 0.5)];
        let v = DVector::from_vec(vec![0.4, -0.3, 0.8]);
        let dt = 0.05;
        for tab in [ButcherTableau::euler(), ButcherTableau::heun(), ButcherTableau::rk4()] {
            let (_, cache) = rk_step(&tab, &lib, &w, &v, dt);
            let derivs = stage_derivatives(&tab, &lib, &w, &dw, 2, &cache, dt).unwrap();
            for j in 0..tab.stages() {
                let fd = fd_jacobian(|x| rk_step(&tab, &lib, &w, x, dt).1.k[j].clone(), &v);
                assert!((&fd - &derivs.dk_dz[j]).amax() <= 1e-6 * fd.amax().max(1.0));
                for p in 0..2 {
                    let h = 1e-6;
                    let kp = rk_step(&tab, &lib, &(&w + &dw[p] * h), &v, dt).1.k[j].clone();
                    let km = rk_step(&tab, &lib, &(&w - &dw[p] * h), &v, dt).1.k[j].clone();
                    let fd = (kp - km) / (2.0 * h);
                    assert!((&fd - &derivs.dk_dmu[j][p]).amax() <= 1e-6 * fd.amax().max(1.0));
                }
            }
            let parts = residual_partials(&tab, &derivs, dt);
            assert_eq!(parts.d_current, DMatrix::identity(3, 3));
            // r̃ = v_next − step(v_prev): ∂/∂v_prev = −∂step/∂v_prev.
            let fd = -fd_jacobian(|x| rk_step(&tab, &lib, &w, x, dt).0, &v);
            assert!((&fd - &parts.d_previous).amax() <= 1e-6 * fd.amax().max(1.0));
        }
    }

    #[test]
    fn zero_dynamics_have_only_explicit_parameter_terms() {
        let lib = FeatureLibrary::new(2, 1).unwrap();
        let w = DMatrix::zeros(3, 2);
        let dw = vec![random_w(3, 2, 9, 1.0)];
        let v = DVector::from_vec(vec![0.2, 0.7]);
        let tab = ButcherTableau::rk4();
        let (_, cache) = rk_step(&tab, &lib, &w, &v, 0.1);
        let derivs = stage_derivatives(&tab, &lib, &w, &dw, 1, &cache, 0.1).unwrap();
        for j in 0..4 {
            assert_eq!(derivs.dk_dz[j].amax(), 0.0);
            let theta = lib.eval(&cache.y[j]).unwrap();
            assert_eq!(derivs.dk_dmu[j][0], dw[0].tr_mul(&theta));
        }
        let derivs = stage_derivatives(&tab, &lib, &w, &[], 3, &cache, 0.1).unwrap();
        assert!(derivs.dk_dmu.iter().flatten().all(|v| v.amax() == 0.0));
    }

    /// A 3-mode model on a toy 8-point initial condition.
    struct ToyInitial;

    impl InitialCondition for ToyInitial {
        fn param_dim(&self) -> usize {
            2
        }
        fn state_dim(&self) -> usize {
            8
        }
        fn eval(&self, mu: &ParameterVector) -> Result<DVector<f64>> {
            Ok(DVector::from_fn(8, |j, _| mu[0] * (j as f64 * 0.4).sin() + mu[1] * mu[1] * (j as f64 * 0.3).cos()))
        }
        fn gradient(&self, mu: &ParameterVector, i: usize) -> Result<DVector<f64>> {
            Ok(DVector::from_fn(8, |j, _| {
                if i == 0 {
                    (j as f64 * 0.4).sin()
                } else {
                    2.0 * mu[1] * (j as f64 * 0.3).cos()
                }
            }))
        }
    }

    fn toy_reducer() -> LinearReducer {
        let raw = DMatrix::from_fn(8, 3, |j, c| ((j + 1) as f64 * (c + 1) as f64 * 0.7).sin());
        LinearReducer::from_basis(raw.qr().q(), None).unwrap()
    }

    fn toy_model(augmented: bool) -> LatentModel {
        let lib = if augmented {
            FeatureLibrary::augmented(3, 2, 1).unwrap()
        } else {
            FeatureLibrary::new(3, 1).unwrap()
        };
        let w = random_w(lib.n_features(), lib.dim(), 1, 0.4);
        let provider = if augmented {
            CoefficientProvider::Implicit { w, param_dim: 2 }
        } else {
            CoefficientProvider::Global { w }
        };
        LatentModel::new(
            toy_reducer(),
            lib,
            provider,
            ButcherTableau::rk4(),
            TimeGrid::new(1.0, 50).unwrap(),
            Arc::new(ToyInitial),
        )
        .unwrap()
    }

    #[test]
    fn latent_initial_partials() {
        let mu = ParameterVector::new(vec![0.5, 1.2]).unwrap();
        for augmented in [false, true] {
            let m = toy_model(augmented);
            let init = m.latent_initial(&mu).unwrap();
            for i in 0..2 {
                let h = 1e-6;
                let fd = (m.latent_initial_state(&mu.perturbed(i, h).unwrap()).unwrap()
                    - m.latent_initial_state(&mu.perturbed(i, -h).unwrap()).unwrap())
                    / (2.0 * h);
                assert!((&fd - &init.partials[i]).amax() <= 1e-6);
                if augmented {
                    assert_eq!(init.partials[i][3 + i], 1.0);
                    assert_eq!(init.partials[i][3 + 1 - i], 0.0);
                }
            }
        }
        let zero = ParameterVector::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(toy_model(false).latent_initial_state(&zero).unwrap().amax(), 0.0);
    }

    #[test]
    fn integrated_trajectory_has_zero_residual() {
        let mu = ParameterVector::new(vec![0.5, 1.2]).unwrap();
        for augmented in [false, true] {
            let m = toy_model(augmented);
            let w = m.coefficients(&mu).unwrap();
            let traj = m.integrate_latent(&mu).unwrap();
            let v0 = traj.row(0).transpose();
            assert_eq!(m.initial_residual(&v0, &mu).unwrap().amax(), 0.0);
            for n in 1..traj.nrows() {
                let r = m.residual(&w, &traj.row(n).transpose(), &traj.row(n - 1).transpose());
                assert_eq!(r.amax(), 0.0, "step {n}");
            }
        }
    }

    #[test]
    fn zero_coefficients_give_constant_trajectory() {
        let m = LatentModel::new(
            toy_reducer(),
            FeatureLibrary::new(3, 1).unwrap(),
            CoefficientProvider::Global { w: DMatrix::zeros(4, 3) },
            ButcherTableau::rk4(),
            TimeGrid::new(1.0, 10).unwrap(),
            Arc::new(ToyInitial),
        )
        .unwrap();
        let mu = ParameterVector::new(vec![0.5, 1.2]).unwrap();
        let traj = m.integrate_latent(&mu).unwrap();
        for n in 0..traj.nrows() {
            assert_eq!(traj.row(n), traj.row(0));
        }
        let full = m.predict_full(&mu).unwrap();
        let z0 = m.latent_initial_state(&mu).unwrap();
        assert!((full.final_state() - m.reducer().decode(&z0).unwrap()).amax() <= 1e-14);
    }

    #[test]
    fn blow_up_is_reported() {
        let lib = FeatureLibrary::new(3, 1).unwrap();
        let mut w = DMatrix::zeros(4, 3);
        w.view_mut((1, 0), (3, 3)).fill_with_identity();
        w *= 40.0;
        let m = LatentModel::new(
            toy_reducer(),
            lib,
            CoefficientProvider::Global { w },
            ButcherTableau::rk4(),
            TimeGrid::new(1.0, 100).unwrap(),
            Arc::new(ToyInitial),
        )
        .unwrap();
        let mu = ParameterVector::new(vec![0.5, 1.2]).unwrap();
        assert!(matches!(m.integrate_latent(&mu), Err(Error::BlowUp { .. })));
    }

    #[test]
    fn inconsistent_components_rejected() {
        let lib = FeatureLibrary::augmented(3, 2, 1).unwrap();
        let w = DMatrix::zeros(lib.n_features(), lib.dim());
        let err = LatentModel::new(
            toy_reducer(),
            lib,
            CoefficientProvider::Global { w },
            ButcherTableau::rk4(),
            TimeGrid::new(1.0, 10).unwrap(),
            Arc::new(ToyInitial),
        );
        assert!(err.is_err());
        let err = LatentModel::new(
            toy_reducer(),
            FeatureLibrary::new(2, 1).unwrap(),
            CoefficientProvider::Global { w: DMatrix::zeros(3, 2) },
            ButcherTableau::rk4(),
            TimeGrid::new(1.0, 10).unwrap(),
            Arc::new(ToyInitial),
        );
        assert!(err.is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn residual_vanishes_on_random_models(seed in 0u64..10_000) {
            let lib = FeatureLibrary::new(3, 2).unwrap();
            let w = random_w(lib.n_features(), 3, seed, 0.3);
            let m = LatentModel::new(
                toy_reducer(),
                lib,
                CoefficientProvider::Global { w: w.clone() },
                ButcherTableau::rk4(),
                TimeGrid::new(0.5, 20).unwrap(),
                Arc::new(ToyInitial),
            )
            .unwrap();
            let mu = ParameterVector::new(vec![0.3, 0.6]).unwrap();
            if let Ok(traj) = m.integrate_latent(&mu) {
                for n in 1..traj.nrows() {
                    let r = m.residual(&w, &traj.row(n).transpose(), &traj.row(n - 1).transpose());
                    prop_assert_eq!(r.amax(), 0.0);
                }
            }
        }
    }
}

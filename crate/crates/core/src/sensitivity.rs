//! Objectives on trajectories and their gradients through the latent
//! surrogate by the direct (forward) and adjoint (backward) recursions, plus
//! the central-difference oracle.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::ParameterVector;
use crate::error::{Error, Result};
use crate::rom::{LatentModel, ResidualPartials};

/// A differentiable function of the full-order states at selected time
/// levels (and possibly of `μ` directly).
pub trait Objective: Send + Sync {
    /// Time levels whose states the objective reads.
    fn levels(&self, steps: usize) -> Vec<usize>;
    /// `states[k]` is the full state at `levels(steps)[k]`.
    fn value(&self, states: &[DVector<f64>], mu: &ParameterVector) -> Result<f64>;
    /// `∂f/∂u` at each listed level.
    fn state_gradients(&self, states: &[DVector<f64>], mu: &ParameterVector) -> Result<Vec<DVector<f64>>>;
    /// Explicit `∂f/∂μ`.
    fn param_gradient(&self, _states: &[DVector<f64>], mu: &ParameterVector) -> Result<DVector<f64>> {
        Ok(DVector::zeros(mu.len()))
    }
}

/// `f = ‖u_N − target‖₂²`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMismatch {
    target: DVector<f64>,
}

impl TargetMismatch {
    pub fn new(target: DVector<f64>) -> Self {
        Self { target }
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    fn residual(&self, states: &[DVector<f64>]) -> Result<DVector<f64>> {
        let [u] = states else {
            return Err(Error::dim("objective states", 1, states.len()));
        };
        if u.len() != self.target.len() {
            return Err(Error::dim("final state", self.target.len(), u.len()));
        }
        Ok(u - &self.target)
    }
}

impl Objective for TargetMismatch {
    fn levels(&self, steps: usize) -> Vec<usize> {
        vec![steps]
    }

    fn value(&self, states: &[DVector<f64>], _mu: &ParameterVector) -> Result<f64> {
        Ok(self.residual(states)?.norm_squared())
    }

    fn state_gradients(&self, states: &[DVector<f64>], _mu: &ParameterVector) -> Result<Vec<DVector<f64>>> {
        Ok(vec![self.residual(states)? * 2.0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    ReducedDirect,
    ReducedAdjoint,
    FomDirect,
    FomAdjoint,
    FiniteDifference,
}

/// Work done by a gradient evaluation. For explicit latent integrators the
/// "linear solves" are applications of `[∂r̃_n/∂z_n]⁻¹ = I`; they are still
/// counted so the direct/adjoint cost scaling is observable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SolveCounts {
    /// Forward trajectory solves (time levels) or objective evaluations.
    pub residual_solves: usize,
    pub linear_solves: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub method: GradientMethod,
    pub cost: SolveCounts,
}

fn check_levels(levels: &[usize], steps: usize) -> Result<()> {
    if let Some(&bad) = levels.iter().find(|&&l| l > steps) {
        return Err(Error::Domain(format!("objective reads level {bad} > {steps}")));
    }
    Ok(())
}

/// Surrogate trajectory, decoded states at the objective's levels, and the
/// latent-space objective gradients `∂f/∂v_n = [∇G_deᵀ ∂f/∂u_n; 0]`.
struct Forward {
    latents: nalgebra::DMatrix<f64>,
    levels: Vec<usize>,
    value: f64,
    dfdv: Vec<DVector<f64>>,
    param_grad: DVector<f64>,
}

fn forward(model: &LatentModel, mu: &ParameterVector, objective: &dyn Objective) -> Result<Forward> {
    let latents = model.integrate_latent(mu)?;
    let steps = model.grid().steps();
    let levels = objective.levels(steps);
    check_levels(&levels, steps)?;
    let states = levels
        .iter()
        .map(|&l| model.decode_state(&latents.row(l).transpose()))
        .collect::<Result<Vec<_>>>()?;
    let value = objective.value(&states, mu)?;
    let dfdu = objective.state_gradients(&states, mu)?;
    let nz = model.reducer().latent_dim();
    let dfdv = dfdu
        .iter()
        .map(|g| {
            let mut out = DVector::zeros(model.state_dim());
            out.rows_mut(0, nz).copy_from(&model.reducer().decoder_jacobian().tr_mul(g));
            out
        })
        .collect();
    let param_grad = objective.param_gradient(&states, mu)?;
    Ok(Forward {
        latents,
        levels,
        value,
        dfdv,
        param_grad,
    })
}

/// Value of the objective on the decoded surrogate trajectory.
pub fn surrogate_objective(model: &LatentModel, mu: &ParameterVector, objective: &dyn Objective) -> Result<f64> {
    Ok(forward(model, mu, objective)?.value)
}

fn step_partials(model: &LatentModel, fwd: &Forward, w: &nalgebra::DMatrix<f64>, dw: &[nalgebra::DMatrix<f64>], n: usize) -> Result<ResidualPartials> {
    model.residual_partials(w, dw, &fwd.latents.row(n - 1).transpose())
}

/// Forward propagation of `∂v_n/∂μ_i`: `(N+1)·N_D` identity "solves".
pub fn reduced_direct_gradient(
    model: &LatentModel,
    mu: &ParameterVector,
    objective: &dyn Objective,
) -> Result<GradientResult> {
    let fwd = forward(model, mu, objective)?;
    let steps = model.grid().steps();
    let nd = mu.len();
    let w = model.coefficients(mu)?;
    let dw = model.coefficient_gradients(mu)?;
    let mut gradient = fwd.param_grad.clone();
    let mut counts = SolveCounts {
        residual_solves: steps + 1,
        linear_solves: 0,
    };

    // ∂v₀/∂μ_i = −[∂r̃₀/∂v₀]⁻¹ ∂r̃₀/∂μ_i.
    let init = model.initial_residual_partials(mu)?;
    let mut sens: Vec<DVector<f64>> = init.d_mu.iter().map(|d| -d).collect();
    counts.linear_solves += nd;
    let accumulate = |n: usize, sens: &[DVector<f64>], gradient: &mut DVector<f64>| {
        for (k, &l) in fwd.levels.iter().enumerate() {
            if l == n {
                for i in 0..nd {
                    gradient[i] += fwd.dfdv[k].dot(&sens[i]);
                }
            }
        }
    };
    accumulate(0, &sens, &mut gradient);
    for n in 1..=steps {
        let p = step_partials(model, &fwd, &w, &dw, n)?;
        for (i, s) in sens.iter_mut().enumerate() {
            *s = -(&p.d_mu[i] + &p.d_previous * &*s);
        }
        counts.linear_solves += nd;
        accumulate(n, &sens, &mut gradient);
    }
    Ok(GradientResult {
        value: fwd.value,
        gradient,
        method: GradientMethod::ReducedDirect,
        cost: counts,
    })
}

/// Backward recursion for the multipliers `λ_n`: `N+1` identity "solves"
/// regardless of `N_D`.
pub fn reduced_adjoint_gradient(
    model: &LatentModel,
    mu: &ParameterVector,
    objective: &dyn Objective,
) -> Result<GradientResult> {
    let fwd = forward(model, mu, objective)?;
    let steps = model.grid().steps();
    let nd = mu.len();
    let d = model.state_dim();
    let w = model.coefficients(mu)?;
    let dw = model.coefficient_gradients(mu)?;
    let mut gradient = fwd.param_grad.clone();
    let mut counts = SolveCounts {
        residual_solves: steps + 1,
        linear_solves: 0,
    };
    let forcing = |n: usize| {
        let mut f = DVector::zeros(d);
        for (k, &l) in fwd.levels.iter().enumerate() {
            if l == n {
                f += &fwd.dfdv[k];
            }
        }
        f
    };

    // λ_N = [∂r̃_N/∂v_N]⁻ᵀ (∂f/∂v_N)ᵀ with ∂r̃_N/∂v_N = I.
    let mut lambda = forcing(steps);
    counts.linear_solves += 1;
    for n in (1..=steps).rev() {
        let p = step_partials(model, &fwd, &w, &dw, n)?;
        for i in 0..nd {
            gradient[i] -= lambda.dot(&p.d_mu[i]);
        }
        lambda = forcing(n - 1) - p.d_previous.tr_mul(&lambda);
        counts.linear_solves += 1;
    }
    let init = model.initial_residual_partials(mu)?;
    for i in 0..nd {
        gradient[i] -= lambda.dot(&init.d_mu[i]);
    }
    Ok(GradientResult {
        value: fwd.value,
        gradient,
        method: GradientMethod::ReducedAdjoint,
        cost: counts,
    })
}

/// Central differences `(f(μ + h e_i) − f(μ − h e_i)) / 2h`.
pub fn fd_gradient<F>(evaluate: F, mu: &ParameterVector, h: f64) -> Result<GradientResult>
where
    F: Fn(&ParameterVector) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let value = evaluate(mu)?;
    let mut gradient = DVector::zeros(mu.len());
    for i in 0..mu.len() {
        let fp = evaluate(&mu.perturbed(i, h)?)?;
        let fm = evaluate(&mu.perturbed(i, -h)?)?;
        gradient[i] = (fp - fm) / (2.0 * h);
    }
    Ok(GradientResult {
        value,
        gradient,
        method: GradientMethod::FiniteDifference,
        cost: SolveCounts {
            residual_solves: 2 * mu.len() + 1,
            linear_solves: 0,
        },
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` (0 when both vanish).
pub fn relative_difference(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{fit_rbf, CoefficientProvider, TrainingCoefficients};
    use crate::data::{InitialCondition, TimeGrid};
    use crate::dynamics::FeatureLibrary;
    use crate::pod::LinearReducer;
    use crate::rom::ButcherTableau;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    struct Bumps;

    impl InitialCondition for Bumps {
        fn param_dim(&self) -> usize {
            2
        }
        fn state_dim(&self) -> usize {
            12
        }
        fn eval(&self, mu: &ParameterVector) -> Result<DVector<f64>> {
            Ok(DVector::from_fn(12, |j, _| {
                let x = j as f64 / 11.0;
                mu[0] * (-(x - 0.3).powi(2) / (0.05 * mu[1])).exp() + 0.2 * mu[1] * x
            }))
        }
        fn gradient(&self, mu: &ParameterVector, i: usize) -> Result<DVector<f64>> {
            Ok(DVector::from_fn(12, |j, _| {
                let x = j as f64 / 11.0;
                let s = (x - 0.3).powi(2);
                let e = (-s / (0.05 * mu[1])).exp();
                if i == 0 {
                    e
                } else {
                    mu[0] * e * s / (0.05 * mu[1] * mu[1]) + 0.2 * x
                }
            }))
        }
    }

    fn reducer() -> LinearReducer {
        let raw = DMatrix::from_fn(12, 3, |j, c| ((j + 2) as f64 * (c + 1) as f64 * 0.37).cos());
        LinearReducer::from_basis(raw.qr().q(), None).unwrap()
    }

    fn random_w(j: usize, d: usize, seed: u64, scale: f64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(j, d, |_, _| scale * rng.random_range(-1.0..1.0))
    }

    /// One model per provider family, all on a 3-dimensional latent space.
    fn models() -> Vec<LatentModel> {
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let make = |lib: FeatureLibrary, provider| {
            LatentModel::new(reducer(), lib, provider, ButcherTableau::rk4(), grid, Arc::new(Bumps)).unwrap()
        };
        let lib = FeatureLibrary::new(3, 2).unwrap();
        let global = make(lib, CoefficientProvider::Global { w: random_w(lib.n_features(), 3, 1, 0.3) });
        let aug = FeatureLibrary::augmented(3, 2, 1).unwrap();
        let implicit = make(
            aug,
            CoefficientProvider::Implicit { w: random_w(aug.n_features(), aug.dim(), 2, 0.3), param_dim: 2 },
        );
        let params: Vec<_> = [[0.5, 0.8], [1.0, 0.9], [0.7, 1.3], [1.2, 1.2]]
            .iter()
            .map(|p| ParameterVector::from_slice(p).unwrap())
            .collect();
        let coeffs = (0..4).map(|k| random_w(lib.n_features(), 3, 10 + k, 0.3)).collect();
        let rbf = make(lib, fit_rbf(TrainingCoefficients::new(params, coeffs).unwrap(), None).unwrap());
        vec![global, implicit, rbf]
    }

    fn objective() -> TargetMismatch {
        TargetMismatch::new(DVector::from_fn(12, |j, _| 0.1 * j as f64))
    }

    #[test]
    fn quadratic_fd_gradient() {
        let c = DVector::from_vec(vec![0.3, -0.2, 1.0]);
        let mu = ParameterVector::new(vec![1.0, 0.5, -0.5]).unwrap();
        let g = fd_gradient(|m| Ok((m.as_vector() - &c).norm_squared()), &mu, 1e-6).unwrap();
        let exact = (mu.as_vector() - &c) * 2.0;
        assert!((g.gradient - exact).amax() <= 1e-8);
        assert_eq!(g.cost.residual_solves, 7);
    }

    #[test]
    fn direct_adjoint_and_fd_agree_on_every_provider() {
        let obj = objective();
        let mu = ParameterVector::new(vec![0.8, 1.05]).unwrap();
        for model in models() {
            let dir = reduced_direct_gradient(&model, &mu, &obj).unwrap();
            let adj = reduced_adjoint_gradient(&model, &mu, &obj).unwrap();
            assert_eq!(dir.value, adj.value);
            let rel = relative_difference(&dir.gradient, &adj.gradient);
            assert!(rel <= 1e-10, "{:?}: {rel:e}", model.provider().kind());
            let fd = fd_gradient(|m| surrogate_objective(&model, m, &obj), &mu, 1e-6).unwrap();
            let rel = relative_difference(&fd.gradient, &adj.gradient);
            assert!(rel <= 1e-5, "{:?}: fd {rel:e}", model.provider().kind());
        }
    }

    #[test]
    fn solve_counts_follow_cost_scaling() {
        let obj = objective();
        let mu = ParameterVector::new(vec![0.8, 1.05]).unwrap();
        let model = &models()[0];
        let dir = reduced_direct_gradient(model, &mu, &obj).unwrap();
        let adj = reduced_adjoint_gradient(model, &mu, &obj).unwrap();
        assert_eq!(dir.cost.linear_solves, 41 * 2);
        assert_eq!(adj.cost.linear_solves, 41);
    }

    #[test]
    fn gradient_vanishes_when_target_is_reachable() {
        let mu = ParameterVector::new(vec![0.8, 1.05]).unwrap();
        for model in models() {
            let target = model.predict_full(&mu).unwrap().final_state();
            let obj = TargetMismatch::new(target);
            let adj = reduced_adjoint_gradient(&model, &mu, &obj).unwrap();
            let dir = reduced_direct_gradient(&model, &mu, &obj).unwrap();
            assert_eq!(adj.value, 0.0);
            assert!(adj.gradient.amax() <= 1e-8);
            assert!(dir.gradient.amax() <= 1e-8);
        }
    }

    #[test]
    fn mismatched_target_is_rejected() {
        let obj = TargetMismatch::new(DVector::zeros(5));
        let mu = ParameterVector::new(vec![0.8, 1.05]).unwrap();
        assert!(reduced_adjoint_gradient(&models()[0], &mu, &obj).is_err());
    }

    /// Reads the states at the midpoint and the end, to exercise the
    /// general multi-level interface.
    struct TwoLevel;

    impl Objective for TwoLevel {
        fn levels(&self, steps: usize) -> Vec<usize> {
            vec![steps / 2, steps]
        }
        fn value(&self, s: &[DVector<f64>], mu: &ParameterVector) -> Result<f64> {
            Ok(s[0].norm_squared() + s[1].sum() + mu[0] * mu[1])
        }
        fn state_gradients(&self, s: &[DVector<f64>], _mu: &ParameterVector) -> Result<Vec<DVector<f64>>> {
            Ok(vec![&s[0] * 2.0, DVector::from_element(s[1].len(), 1.0)])
        }
        fn param_gradient(&self, _s: &[DVector<f64>], mu: &ParameterVector) -> Result<DVector<f64>> {
            Ok(DVector::from_vec(vec![mu[1], mu[0]]))
        }
    }

    #[test]
    fn multi_level_objective_gradients_agree() {
        let mu = ParameterVector::new(vec![0.9, 1.1]).unwrap();
        for model in models() {
            let dir = reduced_direct_gradient(&model, &mu, &TwoLevel).unwrap();
            let adj = reduced_adjoint_gradient(&model, &mu, &TwoLevel).unwrap();
            assert!(relative_difference(&dir.gradient, &adj.gradient) <= 1e-10);
            let fd = fd_gradient(|m| surrogate_objective(&model, m, &TwoLevel), &mu, 1e-6).unwrap();
            assert!(relative_difference(&fd.gradient, &adj.gradient) <= 1e-5);
        }
    }
}

//! Box-constrained minimizers over the design space: BFGS with a penalty
//! for the bounds, Nelder–Mead, differential evolution, and the scalar RBF
//! objective surrogate used as a baseline.

mod bfgs;
mod de;
mod nelder_mead;
mod rbf_surrogate;

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{ParameterDomain, ParameterVector};
use crate::error::{Error, Result};

pub use bfgs::{bfgs_minimize, BfgsConfig};
pub use de::{differential_evolution, DeConfig};
pub use nelder_mead::{nelder_mead_minimize, NelderMeadConfig};
pub use rbf_surrogate::{rbf_objective_surrogate, ScalarRbfSurrogate};

pub type ObjectiveFn<'a> = dyn Fn(&ParameterVector) -> Result<f64> + Sync + 'a;
/// Returns the objective value together with its gradient.
pub type GradientFn<'a> = dyn Fn(&ParameterVector) -> Result<(f64, DVector<f64>)> + Sync + 'a;

pub struct OptProblem<'a> {
    pub domain: ParameterDomain,
    pub x0: ParameterVector,
    pub objective: &'a ObjectiveFn<'a>,
    pub gradient: Option<&'a GradientFn<'a>>,
}

impl<'a> OptProblem<'a> {
    pub fn new(domain: ParameterDomain, x0: ParameterVector, objective: &'a ObjectiveFn<'a>) -> Result<Self> {
        domain.check(&x0)?;
        if !domain.contains(&x0) {
            return Err(Error::Domain("starting point lies outside the domain".into()));
        }
        Ok(Self {
            domain,
            x0,
            objective,
            gradient: None,
        })
    }

    pub fn with_gradient(mut self, gradient: &'a GradientFn<'a>) -> Self {
        self.gradient = Some(gradient);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub mu: Vec<f64>,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    pub mu_hat: ParameterVector,
    pub f_hat: f64,
    pub n_func: usize,
    pub n_grad: usize,
    pub wall_seconds: f64,
    pub converged: bool,
    pub trace: Vec<TracePoint>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Bfgs,
    NelderMead,
    DifferentialEvolution,
}

impl OptimizerKind {
    pub fn label(&self) -> &'static str {
        match self {
            OptimizerKind::Bfgs => "bfgs",
            OptimizerKind::NelderMead => "nelder_mead",
            OptimizerKind::DifferentialEvolution => "differential_evolution",
        }
    }

    pub fn uses_gradient(&self) -> bool {
        matches!(self, OptimizerKind::Bfgs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerSettings {
    #[serde(default)]
    pub bfgs: BfgsConfig,
    #[serde(default)]
    pub nelder_mead: NelderMeadConfig,
    #[serde(default)]
    pub de: DeConfig,
}

/// Runs the chosen optimizer. BFGS requires `problem.gradient`.
pub fn minimize(kind: OptimizerKind, problem: &OptProblem<'_>, settings: &OptimizerSettings) -> Result<OptResult> {
    match kind {
        OptimizerKind::Bfgs => bfgs_minimize(problem, &settings.bfgs),
        OptimizerKind::NelderMead => nelder_mead_minimize(problem, &settings.nelder_mead),
        OptimizerKind::DifferentialEvolution => differential_evolution(problem, &settings.de),
    }
}

/// Counts evaluator calls; evaluation failures become `+∞` so a trial point
/// where the surrogate breaks down is simply rejected.
pub(crate) struct Counted<'p, 'a> {
    problem: &'p OptProblem<'a>,
    n_func: AtomicUsize,
    n_grad: AtomicUsize,
}

impl<'p, 'a> Counted<'p, 'a> {
    pub(crate) fn new(problem: &'p OptProblem<'a>) -> Self {
        Self {
            problem,
            n_func: AtomicUsize::new(0),
            n_grad: AtomicUsize::new(0),
        }
    }

    fn point(x: &DVector<f64>) -> ParameterVector {
        ParameterVector::from_vector(x.clone()).expect("optimizer iterates stay finite")
    }

    pub(crate) fn value(&self, x: &DVector<f64>) -> f64 {
        self.n_func.fetch_add(1, Ordering::Relaxed);
        match (self.problem.objective)(&Self::point(x)) {
            Ok(f) if f.is_finite() => f,
            Ok(_) => f64::INFINITY,
            Err(e) => {
                log::debug!("objective failed at {:?}: {e}", x.as_slice());
                f64::INFINITY
            }
        }
    }

    pub(crate) fn value_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let grad = self
            .problem
            .gradient
            .ok_or_else(|| Error::Config("this optimizer needs a gradient".into()))?;
        self.n_grad.fetch_add(1, Ordering::Relaxed);
        grad(&Self::point(x))
    }

    pub(crate) fn counts(&self) -> (usize, usize) {
        (self.n_func.load(Ordering::Relaxed), self.n_grad.load(Ordering::Relaxed))
    }
}

#[cfg(test)]
pub(crate) mod test_problems {
    use super::*;

    pub fn rosenbrock(x: &ParameterVector) -> Result<f64> {
        Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
    }

    pub fn rosenbrock_grad(x: &ParameterVector) -> Result<(f64, DVector<f64>)> {
        let g = DVector::from_vec(vec![
            -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
            200.0 * (x[1] - x[0] * x[0]),
        ]);
        Ok((rosenbrock(x)?, g))
    }
}

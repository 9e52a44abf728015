use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Counted, OptProblem, OptResult, TracePoint};
use crate::data::ParameterVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BfgsConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Backtracking factor.
    pub shrink: f64,
    pub max_backtracks: usize,
    /// After `stall_iters` consecutive iterations whose relative merit
    /// decrease is below `stall_tol`, the inverse Hessian is reset; after
    /// `max_restarts` such resets the run stops unconverged. Near the box
    /// boundary the merit has a kink (the gradient need not vanish there)
    /// and penalty curvature can poison the quasi-Newton matrix.
    pub stall_tol: f64,
    pub stall_iters: usize,
    pub max_restarts: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 200,
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 40,
            stall_tol: 1e-14,
            stall_iters: 5,
            max_restarts: 3,
        }
    }
}

/// Unconstrained merit `F(x) = f(clamp x) + ρ·‖x − clamp x‖²` and its gradient.
struct Penalized<'c, 'p, 'a> {
    eval: &'c Counted<'p, 'a>,
    problem: &'p OptProblem<'a>,
    rho: f64,
}

impl Penalized<'_, '_, '_> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        let c = self.problem.domain.clamp(x);
        self.eval.value(&c) + self.rho * (x - &c).norm_squared()
    }

    fn value_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let c = self.problem.domain.clamp(x);
        let (f, mut g) = self.eval.value_and_gradient(&c)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("gradient evaluation returned non-finite values".into()));
        }
        for i in 0..x.len() {
            if x[i] != c[i] {
                // The clamp is flat in this coordinate.
                g[i] = 0.0;
            }
        }
        let off = x - &c;
        Ok((f + self.rho * off.norm_squared(), g + off * (2.0 * self.rho)))
    }
}

/// Quasi-Newton minimization with an Armijo backtracking line search.
pub fn bfgs_minimize(problem: &OptProblem<'_>, cfg: &BfgsConfig) -> Result<OptResult> {
    if problem.gradient.is_none() {
        return Err(Error::Config("BFGS needs a gradient evaluator".into()));
    }
    let start = Instant::now();
    let counted = Counted::new(problem);
    let n = problem.x0.len();
    let mut x = problem.x0.as_vector().clone();
    let (f0, _) = counted.value_and_gradient(&x)?;
    let merit = Penalized {
        eval: &counted,
        problem,
        rho: 1e3 * f0.abs() + 1.0,
    };
    let (mut f, mut g) = merit.value_and_gradient(&x)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first_update = true;
    let mut trace = vec![TracePoint {
        mu: problem.domain.clamp(&x).as_slice().to_vec(),
        f,
    }];
    let mut converged = false;
    let mut message = format!("reached max_iter = {}", cfg.max_iter);
    let mut stalled = 0;
    let mut restarts = 0;

    for _ in 0..cfg.max_iter {
        if g.amax() <= cfg.grad_tol {
            converged = true;
            message = "gradient tolerance met".into();
            break;
        }
        let mut p = -(&h * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            p = -g.clone();
            slope = -g.norm_squared();
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let trial = &x + &p * alpha;
            let ft = merit.value(&trial);
            if ft <= f + cfg.c1 * alpha * slope {
                accepted = Some(trial);
                break;
            }
            alpha *= cfg.shrink;
        }
        let Some(x_new) = accepted else {
            message = "line search failed to find sufficient decrease".into();
            break;
        };
        let (f_new, g_new) = match merit.value_and_gradient(&x_new) {
            Ok(v) => v,
            Err(e) => {
                message = format!("gradient evaluation failed: {e}");
                break;
            }
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first_update {
                h = DMatrix::identity(n, n) * (sy / y.norm_squared());
                first_update = false;
            }
            let r = 1.0 / sy;
            let hy = &h * &y;
            // H ← H − r(H y sᵀ + s yᵀ H) + (r² yᵀHy + r) s sᵀ.
            let yhy = y.dot(&hy);
            h -= (&hy * s.transpose() + &s * hy.transpose()) * r;
            h += (&s * s.transpose()) * (r * r * yhy + r);
        }
        stalled = if f - f_new <= cfg.stall_tol * f.abs() { stalled + 1 } else { 0 };
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(TracePoint {
            mu: problem.domain.clamp(&x).as_slice().to_vec(),
            f,
        });
        if stalled >= cfg.stall_iters {
            if restarts == cfg.max_restarts {
                message = format!("merit stalled after {restarts} restarts");
                break;
            }
            restarts += 1;
            stalled = 0;
            h = DMatrix::identity(n, n);
            first_update = true;
        }
    }
    if !converged && g.amax() <= cfg.grad_tol {
        converged = true;
        message = "gradient tolerance met".into();
    }

    let mu_hat = ParameterVector::from_vector(problem.domain.clamp(&x))?;
    let f_hat = merit.value(&x);
    let (n_func, n_grad) = counted.counts();
    Ok(OptResult {
        mu_hat,
        f_hat,
        n_func,
        n_grad,
        wall_seconds: start.elapsed().as_secs_f64(),
        converged,
        trace,
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ParameterDomain;
    use crate::optimize::test_problems::{rosenbrock, rosenbrock_grad};
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn quadratic_bowl_in_few_iterations() {
        let c = DVector::from_vec(vec![0.75, 1.05, 0.85, 0.95]);
        let f = |m: &ParameterVector| Ok((m.as_vector() - &c).norm_squared());
        let grad = |m: &ParameterVector| Ok(((m.as_vector() - &c).norm_squared(), (m.as_vector() - &c) * 2.0));
        let dom = ParameterDomain::burgers();
        let problem = OptProblem::new(dom.clone(), dom.center(), &f).unwrap().with_gradient(&grad);
        let res = bfgs_minimize(&problem, &BfgsConfig::default()).unwrap();
        assert!(res.converged, "{}", res.message);
        assert!((res.mu_hat.as_vector() - &c).amax() <= 1e-8);
        assert!(res.trace.len() - 1 <= 3);
    }

    #[test]
    fn rosenbrock_from_classic_start() {
        let dom = ParameterDomain::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let x0 = ParameterVector::new(vec![-1.2, 1.0]).unwrap();
        let problem = OptProblem::new(dom, x0, &rosenbrock).unwrap().with_gradient(&rosenbrock_grad);
        let cfg = BfgsConfig {
            max_iter: 100,
            ..BfgsConfig::default()
        };
        let res = bfgs_minimize(&problem, &cfg).unwrap();
        assert!((res.mu_hat[0] - 1.0).abs() <= 1e-6 && (res.mu_hat[1] - 1.0).abs() <= 1e-6, "{:?}", res);
    }

    #[test]
    fn boundary_minimizer_stays_in_domain() {
        // Unconstrained minimizer at (2, 0) lies outside [0,1]².
        let f = |m: &ParameterVector| Ok((m[0] - 2.0).powi(2) + m[1] * m[1]);
        let grad = |m: &ParameterVector| {
            Ok(((m[0] - 2.0).powi(2) + m[1] * m[1], DVector::from_vec(vec![2.0 * (m[0] - 2.0), 2.0 * m[1]])))
        };
        let dom = ParameterDomain::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let problem = OptProblem::new(dom.clone(), dom.center(), &f).unwrap().with_gradient(&grad);
        let res = bfgs_minimize(&problem, &BfgsConfig::default()).unwrap();
        assert!(dom.contains(&res.mu_hat));
        assert!((res.mu_hat[0] - 1.0).abs() <= 1e-6);
        // The kink at the bound ends the run early instead of at max_iter.
        assert!(res.trace.len() - 1 < BfgsConfig::default().max_iter, "{}", res.message);
    }

    #[test]
    fn counters_match_evaluator_calls() {
        let calls = AtomicUsize::new(0);
        let grads = AtomicUsize::new(0);
        let f = |m: &ParameterVector| {
            calls.fetch_add(1, Ordering::Relaxed);
            rosenbrock(m)
        };
        let g = |m: &ParameterVector| {
            grads.fetch_add(1, Ordering::Relaxed);
            rosenbrock_grad(m)
        };
        let dom = ParameterDomain::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let x0 = ParameterVector::new(vec![-1.2, 1.0]).unwrap();
        let problem = OptProblem::new(dom, x0, &f).unwrap().with_gradient(&g);
        let res = bfgs_minimize(&problem, &BfgsConfig::default()).unwrap();
        assert_eq!(res.n_func, calls.load(Ordering::Relaxed));
        assert_eq!(res.n_grad, grads.load(Ordering::Relaxed));
    }

    #[test]
    fn missing_gradient_is_config_error() {
        let dom = ParameterDomain::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let problem = OptProblem::new(dom.clone(), dom.center(), &rosenbrock).unwrap();
        assert!(matches!(bfgs_minimize(&problem, &BfgsConfig::default()), Err(Error::Config(_))));
    }
}

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{Counted, OptProblem, OptResult, TracePoint};
use crate::data::ParameterVector;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadConfig {
    /// Stop once every vertex is within this ∞-distance of the best one.
    pub x_tol: f64,
    pub max_evals: usize,
    /// Initial edge length as a fraction of each coordinate's range.
    pub initial_step: f64,
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        Self {
            x_tol: 1e-8,
            max_evals: 2000,
            initial_step: 0.1,
        }
    }
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Downhill simplex with every trial point clamped into the domain. Ties are
/// broken by vertex age so runs are reproducible. A collapsed simplex is
/// restarted until a restart brings no improvement.
pub fn nelder_mead_minimize(problem: &OptProblem<'_>, cfg: &NelderMeadConfig) -> Result<OptResult> {
    let start = Instant::now();
    let counted = Counted::new(problem);
    let dom = &problem.domain;
    let n = problem.x0.len();
    let x0 = problem.x0.as_vector().clone();

    let initial = |center: DVector<f64>, f_center: f64| {
        let mut simplex = vec![(center.clone(), f_center)];
        for i in 0..n {
            let range = dom.upper()[i] - dom.lower()[i];
            let mut v = center.clone();
            let step = cfg.initial_step * range;
            v[i] = if v[i] + step <= dom.upper()[i] { v[i] + step } else { v[i] - step };
            let f = counted.value(&v);
            simplex.push((v, f));
        }
        simplex
    };
    let f0 = counted.value(&x0);
    let mut simplex = initial(x0, f0);
    let mut f_restart = f0;
    let mut trace = Vec::new();
    let mut converged = false;

    loop {
        // Stable sort keeps older vertices first among equal values.
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        trace.push(TracePoint {
            mu: simplex[0].0.as_slice().to_vec(),
            f: simplex[0].1,
        });
        let diameter = simplex[1..]
            .iter()
            .map(|(v, _)| (v - &simplex[0].0).amax())
            .fold(0.0, f64::max);
        if diameter <= cfg.x_tol {
            // Clamping can flatten the simplex onto a face of the box; a fresh
            // simplex around the best vertex either confirms the point or
            // escapes.
            if simplex[0].1 < f_restart && counted.counts().0 + n < cfg.max_evals {
                f_restart = simplex[0].1;
                let (best, f_best) = simplex[0].clone();
                simplex = initial(best, f_best);
                continue;
            }
            converged = true;
            break;
        }
        if counted.counts().0 >= cfg.max_evals {
            break;
        }

        let centroid = simplex[..n].iter().fold(DVector::zeros(n), |acc, (v, _)| acc + v) / n as f64;
        let (worst, f_worst) = simplex[n].clone();
        let f_best = simplex[0].1;
        let f_second = simplex[n - 1].1;
        let along = |t: f64| dom.clamp(&(&centroid + (&centroid - &worst) * t));

        let xr = along(REFLECT);
        let fr = counted.value(&xr);
        if fr < f_best {
            let xe = along(REFLECT * EXPAND);
            let fe = counted.value(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < f_second {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc, accept) = if fr < f_worst {
            let xc = along(REFLECT * CONTRACT);
            let fc = counted.value(&xc);
            (xc, fc, fc <= fr)
        } else {
            let xc = along(-CONTRACT);
            let fc = counted.value(&xc);
            (xc, fc, fc < f_worst)
        };
        if accept {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let v = &best + (&vertex.0 - &best) * SHRINK;
            let f = counted.value(&v);
            *vertex = (v, f);
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (n_func, n_grad) = counted.counts();
    Ok(OptResult {
        mu_hat: ParameterVector::from_vector(simplex[0].0.clone())?,
        f_hat: simplex[0].1,
        n_func,
        n_grad,
        wall_seconds: start.elapsed().as_secs_f64(),
        converged,
        trace,
        message: if converged {
            "simplex diameter below tolerance".into()
        } else {
            format!("reached max_evals = {}", cfg.max_evals)
        },
    })
}

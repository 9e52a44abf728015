use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Counted, OptProblem, OptResult, TracePoint};
use crate::data::ParameterVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeConfig {
    pub pop: usize,
    /// Differential weight.
    pub f: f64,
    /// Crossover probability.
    pub cr: f64,
    pub seed: u64,
    pub max_gen: usize,
    /// Stop when the population's objective spread falls below this.
    pub tol: f64,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            pop: 20,
            f: 0.8,
            cr: 0.9,
            seed: 0,
            max_gen: 200,
            tol: 1e-12,
        }
    }
}

/// DE/rand/1/bin with mutants clipped into the box. All random draws happen
/// on one seeded stream before each generation's (parallel) evaluation, so
/// results do not depend on thread scheduling.
pub fn differential_evolution(problem: &OptProblem<'_>, cfg: &DeConfig) -> Result<OptResult> {
    if cfg.pop < 4 {
        return Err(Error::Config(format!("population must be >= 4, got {}", cfg.pop)));
    }
    if !(cfg.cr >= 0.0 && cfg.cr <= 1.0 && cfg.f > 0.0) {
        return Err(Error::Config("need 0 <= CR <= 1 and F > 0".into()));
    }
    let start = Instant::now();
    let counted = Counted::new(problem);
    let dom = &problem.domain;
    let n = problem.x0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut pop: Vec<DVector<f64>> = (0..cfg.pop)
        .map(|_| DVector::from_fn(n, |i, _| rng.random_range(dom.lower()[i]..=dom.upper()[i])))
        .collect();
    let mut fit: Vec<f64> = pop.par_iter().map(|x| counted.value(x)).collect();
    let mut trace = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.max_gen {
        let best = argmin(&fit);
        trace.push(TracePoint {
            mu: pop[best].as_slice().to_vec(),
            f: fit[best],
        });
        let (lo, hi) = fit.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if hi - lo <= cfg.tol {
            converged = true;
            break;
        }
        let trials: Vec<DVector<f64>> = (0..cfg.pop)
            .map(|target| {
                let [r1, r2, r3] = distinct(&mut rng, cfg.pop, target);
                let mutant = dom.clamp(&(&pop[r1] + (&pop[r2] - &pop[r3]) * cfg.f));
                let forced = rng.random_range(0..n);
                DVector::from_fn(n, |j, _| {
                    if j == forced || rng.random::<f64>() < cfg.cr {
                        mutant[j]
                    } else {
                        pop[target][j]
                    }
                })
            })
            .collect();
        let trial_fit: Vec<f64> = trials.par_iter().map(|x| counted.value(x)).collect();
        for (k, (x, f)) in trials.into_iter().zip(trial_fit).enumerate() {
            if f <= fit[k] {
                pop[k] = x;
                fit[k] = f;
            }
        }
    }

    let best = argmin(&fit);
    let (n_func, n_grad) = counted.counts();
    Ok(OptResult {
        mu_hat: ParameterVector::from_vector(pop[best].clone())?,
        f_hat: fit[best],
        n_func,
        n_grad,
        wall_seconds: start.elapsed().as_secs_f64(),
        converged,
        trace,
        message: if converged {
            "population objective spread below tolerance".into()
        } else {
            format!("reached max_gen = {}", cfg.max_gen)
        },
    })
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.total_cmp(&v[best]).is_lt() {
            best = i;
        }
    }
    best
}

fn distinct(rng: &mut ChaCha8Rng, pop: usize, exclude: usize) -> [usize; 3] {
    let mut out = [usize::MAX; 3];
    let mut k = 0;
    while k < 3 {
        let c = rng.random_range(0..pop);
        if c != exclude && !out[..k].contains(&c) {
            out[k] = c;
            k += 1;
        }
    }
    out
}

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use wlasdi::experiment::{
    assess, cached_solve, cell_name, final_state_csv, load_model, noisy_training, optimize_surrogate, prepare,
    run_bench, save_model, train_surrogate, ExperimentConfig, PreparedData, TrainedSurrogate,
};
use wlasdi::fom::{fom_gradient_adjoint, fom_gradient_direct, fom_objective, fom_solve};
use wlasdi::io::write_snapshot;
use wlasdi::optimize::OptimizerKind;
use wlasdi::sensitivity::{
    fd_gradient, reduced_adjoint_gradient, reduced_direct_gradient, relative_difference, surrogate_objective,
    GradientResult,
};
use wlasdi::{BurgersConfig, DynamicsForm, LatentModel, ParameterVector, TargetMismatch};

use crate::{CliError, MethodArg};

type CliResult = Result<(), CliError>;

fn parse_mu(cfg: &ExperimentConfig, values: Vec<f64>) -> Result<ParameterVector, CliError> {
    let mu = ParameterVector::new(values)?;
    cfg.domain.check(&mu)?;
    Ok(mu)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

fn model_dir(cfg: &ExperimentConfig, model: Option<PathBuf>) -> PathBuf {
    model.unwrap_or_else(|| cfg.out_dir.join("model"))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(wlasdi::Error::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// The noise-free target state, shared with `train` and `bench` through the
/// output directory's trajectory cache.
fn target_data(cfg: &ExperimentConfig, burgers: &BurgersConfig) -> Result<PreparedData, CliError> {
    let target_mu = cfg.target_mu()?;
    let path = out_dir(cfg)?.join("fom-cache").join("target.bin");
    let target_state = cached_solve(&target_mu, burgers, Some(path))?.final_state();
    Ok(PreparedData {
        params: Vec::new(),
        clean: Vec::new(),
        target_mu,
        target_state,
    })
}

pub fn fom_run(cfg: &ExperimentConfig, mu: Option<Vec<f64>>) -> CliResult {
    let mu = match mu {
        Some(v) => parse_mu(cfg, v)?,
        None => cfg.target_mu()?,
    };
    let dir = out_dir(cfg)?;
    let snapshots = fom_solve(&mu, &cfg.burgers)?;
    write_snapshot(&snapshots, &dir.join("fom.bin"))?;
    fs::write(dir.join("final_state.csv"), final_state_csv(&cfg.burgers, &snapshots.final_state()))?;
    println!(
        "solved mu = {:?}: {} time levels x {} points -> {}",
        mu.as_slice(),
        snapshots.grid().len(),
        snapshots.state_dim(),
        dir.join("fom.bin").display()
    );
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, method: MethodArg, noise: f64) -> CliResult {
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(CliError::Usage(format!("--noise must be >= 0, got {noise}")));
    }
    let dir = out_dir(cfg)?;
    let data = prepare(cfg, Some(&dir.join("fom-cache")))?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let training = noisy_training(&data.clean, noise, seed, cfg.noise_scale)?;
    let form = method.form();
    let trained = train_surrogate(
        &cfg.surrogate,
        form,
        cfg.surrogate.criterion_for(noise),
        &cfg.burgers,
        &data.params,
        &training,
    )?;
    save_model(&trained, &cfg.burgers, &dir.join("model"))?;

    // Reconstruction error against the clean trajectories; `null` where the
    // surrogate cannot be integrated.
    let errors: Vec<Option<f64>> = data
        .params
        .iter()
        .zip(&data.clean)
        .map(|(mu, clean)| {
            trained
                .model
                .predict_full(mu)
                .ok()
                .map(|p| (p.data() - clean.data()).norm() / clean.data().norm())
        })
        .collect();
    let finite: Vec<f64> = errors.iter().flatten().copied().collect();
    let mean = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
    write_json(
        &dir.join("metrics.json"),
        &json!({
            "config_hash": cfg.hash(),
            "form": form,
            "noise": noise,
            "seed": seed,
            "latent_dim": trained.model.reducer().latent_dim(),
            "train_seconds": trained.train_seconds,
            "training_relative_errors": errors,
            "mean_training_relative_error": mean,
        }),
    )?;
    println!(
        "trained {} surrogate: N_z = {}, {:.2} s, mean training error {} -> {}",
        form_label(form),
        trained.model.reducer().latent_dim(),
        trained.train_seconds,
        mean.map_or("n/a".into(), |m| format!("{m:.3e}")),
        dir.join("model").display()
    );
    Ok(())
}

fn form_label(form: DynamicsForm) -> &'static str {
    match form {
        DynamicsForm::Weak => "WLaSDI",
        DynamicsForm::Strong => "LaSDI",
    }
}

pub fn predict(cfg: &ExperimentConfig, model: Option<PathBuf>, mu: Vec<f64>) -> CliResult {
    let (trained, burgers) = load_model(&model_dir(cfg, model))?;
    let mu = parse_mu(cfg, mu)?;
    let dir = out_dir(cfg)?;
    let prediction = trained.model.predict_full(&mu)?;
    write_snapshot(&prediction, &dir.join("predict.bin"))?;
    fs::write(dir.join("final_state.csv"), final_state_csv(&burgers, &prediction.final_state()))?;
    println!("predicted mu = {:?} -> {}", mu.as_slice(), dir.join("predict.bin").display());
    Ok(())
}

pub fn optimize(cfg: &ExperimentConfig, model: Option<PathBuf>, kind: OptimizerKind) -> CliResult {
    let (trained, burgers) = load_model(&model_dir(cfg, model))?;
    let data = target_data(cfg, &burgers)?;
    let res = optimize_surrogate(&trained.model, &data.objective(), kind, cfg.gradient, cfg)?;
    let (e2, f_true) = assess(&res.mu_hat, &data, &burgers)?;
    let dir = out_dir(cfg)?;
    write_json(
        &dir.join("optimize.json"),
        &json!({
            "optimizer": kind,
            "mu_hat": res.mu_hat.as_slice(),
            "mu_target": data.target_mu.as_slice(),
            "f_surrogate": res.f_hat,
            "f_true": f_true,
            "e2_percent": e2,
            "n_func": res.n_func,
            "n_grad": res.n_grad,
            "opt_seconds": res.wall_seconds,
            "converged": res.converged,
            "message": res.message,
            "trace": res.trace,
        }),
    )?;
    let final_state = fom_solve(&res.mu_hat, &burgers)?.final_state();
    fs::write(dir.join("final_state.csv"), final_state_csv(&burgers, &final_state))?;
    println!(
        "{}: mu_hat = {:?}, E2 = {e2:.4}%, f_true = {f_true:.4e}, {} func / {} grad evals, {:.2} s ({})",
        kind.label(),
        res.mu_hat.as_slice(),
        res.n_func,
        res.n_grad,
        res.wall_seconds,
        res.message
    );
    Ok(())
}

pub fn bench(cfg: &ExperimentConfig) -> CliResult {
    let dir = out_dir(cfg)?;
    let data = prepare(cfg, Some(&dir.join("fom-cache")))?;
    let report = run_bench(cfg, &data, Some(&dir.join("models")));
    report.write(dir)?;
    write_json(&dir.join("config.json"), &serde_json::to_value(cfg).map_err(wlasdi::Error::from)?)?;

    let states = dir.join("final_states");
    fs::create_dir_all(&states)?;
    fs::write(states.join("target.csv"), final_state_csv(&cfg.burgers, &data.target_state))?;
    for r in report.rows.iter().filter(|r| r.error.is_none()) {
        let mu = ParameterVector::new(r.mu_hat.clone())?;
        let u = fom_solve(&mu, &cfg.burgers)?.final_state();
        let name = format!("{}_{}.csv", cell_name(r.noise, r.seed, r.method), r.optimizer.label());
        fs::write(states.join(name), final_state_csv(&cfg.burgers, &u))?;
    }
    print!("{}", report.render_table());
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see report.md", report.rows.len());
    }
    Ok(())
}

struct Check {
    name: &'static str,
    adjoint: GradientResult,
    direct: GradientResult,
    fd: GradientResult,
}

impl Check {
    fn errors(&self) -> [(&'static str, f64); 3] {
        [
            ("adjoint vs direct", relative_difference(&self.adjoint.gradient, &self.direct.gradient)),
            ("adjoint vs fd", relative_difference(&self.adjoint.gradient, &self.fd.gradient)),
            ("direct vs fd", relative_difference(&self.direct.gradient, &self.fd.gradient)),
        ]
    }

    fn to_json(&self) -> serde_json::Value {
        let g = |r: &GradientResult| r.gradient.as_slice().to_vec();
        json!({
            "value": self.adjoint.value,
            "adjoint": g(&self.adjoint),
            "direct": g(&self.direct),
            "fd": g(&self.fd),
            "adjoint_cost": self.adjoint.cost,
            "direct_cost": self.direct.cost,
            "relative_errors": self.errors().iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
        })
    }
}

fn surrogate_check(model: &LatentModel, mu: &ParameterVector, objective: &TargetMismatch, h: f64) -> Result<Check, CliError> {
    Ok(Check {
        name: "surrogate",
        adjoint: reduced_adjoint_gradient(model, mu, objective)?,
        direct: reduced_direct_gradient(model, mu, objective)?,
        fd: fd_gradient(|m| surrogate_objective(model, m, objective), mu, h)?,
    })
}

fn fom_check(burgers: &BurgersConfig, mu: &ParameterVector, objective: &TargetMismatch, h: f64) -> Result<Check, CliError> {
    Ok(Check {
        name: "fom",
        adjoint: fom_gradient_adjoint(mu, burgers, objective)?,
        direct: fom_gradient_direct(mu, burgers, objective)?,
        fd: fd_gradient(|m| fom_objective(m, burgers, objective), mu, h)?,
    })
}

pub fn gradcheck(cfg: &ExperimentConfig, model: Option<PathBuf>, mu: Option<Vec<f64>>, h: f64) -> CliResult {
    let mu = match mu {
        Some(v) => parse_mu(cfg, v)?,
        None => cfg.x0()?,
    };
    let (trained, burgers): (TrainedSurrogate, BurgersConfig) = match model {
        Some(dir) => load_model(&dir)?,
        None => {
            let data = prepare(cfg, Some(&out_dir(cfg)?.join("fom-cache")))?;
            let t = train_surrogate(
                &cfg.surrogate,
                DynamicsForm::Weak,
                cfg.surrogate.criterion,
                &cfg.burgers,
                &data.params,
                &data.clean,
            )?;
            (t, cfg.burgers)
        }
    };
    let objective = target_data(cfg, &burgers)?.objective();
    let checks = [
        fom_check(&burgers, &mu, &objective, h)?,
        surrogate_check(&trained.model, &mu, &objective, h)?,
    ];
    let mut max = 0.0_f64;
    for c in &checks {
        for (what, e) in c.errors() {
            println!("{:<9} {what:<17} max relative error {e:.3e}", c.name);
            max = max.max(e);
        }
    }
    println!("overall max relative error {max:.3e}");
    let dir = out_dir(cfg)?;
    write_json(
        &dir.join("gradcheck.json"),
        &json!({
            "mu": mu.as_slice(),
            "fd_step": h,
            "fom": checks[0].to_json(),
            "surrogate": checks[1].to_json(),
            "max_relative_error": max,
        }),
    )
}

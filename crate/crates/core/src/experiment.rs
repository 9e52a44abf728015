//! The Burgers inverse-problem benchmark: configuration, training pipeline,
//! model bundles, and the {noise} × {method} × {optimizer} report matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coeff::{
    fit_convex, fit_global, fit_gp, fit_implicit, fit_rbf, CoefficientProvider, ProviderHyper, ProviderKind,
    TrainingCoefficients,
};
use crate::data::{
    inject_noise, relative_param_error, NoiseScale, NoiseSpec, ParameterDomain, ParameterVector, SnapshotMatrix,
};
use crate::dynamics::{build_test_functions, DynamicsForm, FeatureLibrary, Identifier, TestFunctionParams};
use crate::error::{Error, Result};
use crate::fom::{fom_gradient_adjoint, fom_objective, fom_solve, BurgersConfig};
use crate::io::{read_matrix, read_snapshot, read_sidecar, write_matrix, write_sidecar, write_snapshot};
use crate::optimize::{minimize, rbf_objective_surrogate, OptProblem, OptResult, OptimizerKind, OptimizerSettings};
use crate::pod::{pod_fit_snapshots, LinearReducer, ReducerCriterion};
use crate::rom::{ButcherTableau, Integrator, LatentModel};
use crate::sensitivity::{reduced_adjoint_gradient, reduced_direct_gradient, surrogate_objective, GradientMethod, TargetMismatch};

/// Training parameters are every combination of the per-coordinate levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDesign {
    pub levels: Vec<Vec<f64>>,
}

impl Default for TrainingDesign {
    fn default() -> Self {
        Self {
            levels: vec![vec![0.7, 0.9], vec![0.9, 1.1], vec![0.7, 0.9], vec![0.9, 1.1]],
        }
    }
}

impl TrainingDesign {
    /// Cartesian product with the last coordinate varying fastest.
    pub fn params(&self) -> Result<Vec<ParameterVector>> {
        if self.levels.is_empty() || self.levels.iter().any(Vec::is_empty) {
            return Err(Error::Config("training grid is empty".into()));
        }
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for lv in &self.levels {
            out = out
                .into_iter()
                .flat_map(|p| {
                    lv.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out.into_iter().map(ParameterVector::new).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateSpec {
    /// Latent size rule on clean data.
    pub criterion: ReducerCriterion,
    /// Latent size rule on noisy data, where the energy rule would keep
    /// noise modes.
    pub noisy_criterion: ReducerCriterion,
    pub center: bool,
    pub degree: u8,
    pub provider: ProviderKind,
    pub hyper: ProviderHyper,
    pub test_functions: TestFunctionParams,
    pub integrator: Integrator,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            criterion: ReducerCriterion::default(),
            noisy_criterion: ReducerCriterion::Fixed(9),
            center: false,
            degree: 1,
            provider: ProviderKind::Implicit,
            hyper: ProviderHyper::default(),
            test_functions: TestFunctionParams::default(),
            integrator: Integrator::Rk4,
        }
    }
}

impl SurrogateSpec {
    pub fn criterion_for(&self, noise: f64) -> ReducerCriterion {
        if noise > 0.0 {
            self.noisy_criterion
        } else {
            self.criterion
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Weak-form identified latent dynamics.
    Wlasdi,
    /// Strong-form (finite-difference) identified latent dynamics.
    Lasdi,
    /// RBF interpolation of the scalar objective over the training points.
    RbfObjective,
    /// The full-order model itself.
    Fom,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Wlasdi => "WLaSDI",
            Method::Lasdi => "LaSDI",
            Method::RbfObjective => "RBF-interp",
            Method::Fom => "FOM",
        }
    }

    pub fn form(&self) -> Option<DynamicsForm> {
        match self {
            Method::Wlasdi => Some(DynamicsForm::Weak),
            Method::Lasdi => Some(DynamicsForm::Strong),
            _ => None,
        }
    }

    /// Whether a gradient-based optimizer row exists for this method.
    pub fn has_gradient(&self) -> bool {
        !matches!(self, Method::RbfObjective)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub burgers: BurgersConfig,
    pub domain: ParameterDomain,
    pub training: TrainingDesign,
    pub noise_ratios: Vec<f64>,
    pub noise_scale: NoiseScale,
    pub surrogate: SurrogateSpec,
    pub target: Vec<f64>,
    /// Optimizer start; the domain center when absent.
    pub x0: Option<Vec<f64>>,
    pub methods: Vec<Method>,
    pub optimizers: Vec<OptimizerKind>,
    pub optimizer_settings: OptimizerSettings,
    /// Gradient route handed to gradient-based optimizers.
    pub gradient: GradientMethod,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            burgers: BurgersConfig::benchmark(),
            domain: ParameterDomain::burgers(),
            training: TrainingDesign::default(),
            noise_ratios: vec![0.0],
            noise_scale: NoiseScale::Rms,
            surrogate: SurrogateSpec::default(),
            target: vec![0.75, 1.05, 0.85, 0.95],
            x0: None,
            methods: vec![Method::Wlasdi, Method::Lasdi, Method::RbfObjective],
            optimizers: vec![OptimizerKind::NelderMead, OptimizerKind::Bfgs],
            optimizer_settings: OptimizerSettings::default(),
            gradient: GradientMethod::ReducedAdjoint,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.burgers.validate()?;
        let target = self.target_mu()?;
        if !self.domain.contains(&target) {
            return Err(Error::Config("target lies outside the parameter domain".into()));
        }
        let x0 = self.x0()?;
        if !self.domain.contains(&x0) {
            return Err(Error::Config("x0 lies outside the parameter domain".into()));
        }
        for p in self.training.params()? {
            if p.len() != self.domain.dim() {
                return Err(Error::Config(format!(
                    "training parameters have {} entries, domain has {}",
                    p.len(),
                    self.domain.dim()
                )));
            }
        }
        if let Some(r) = self.noise_ratios.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(Error::Config(format!("noise ratio must be >= 0, got {r}")));
        }
        if self.noise_ratios.iter().any(|&r| r > 0.0) && self.seeds.is_empty() {
            return Err(Error::Config("noisy runs need at least one seed".into()));
        }
        if !matches!(self.gradient, GradientMethod::ReducedAdjoint | GradientMethod::ReducedDirect) {
            return Err(Error::Config("gradient must be reduced_adjoint or reduced_direct".into()));
        }
        Ok(())
    }

    pub fn target_mu(&self) -> Result<ParameterVector> {
        let mu = ParameterVector::new(self.target.clone())?;
        self.domain.check(&mu)?;
        Ok(mu)
    }

    pub fn x0(&self) -> Result<ParameterVector> {
        let mu = match &self.x0 {
            Some(v) => ParameterVector::new(v.clone())?,
            None => self.domain.center(),
        };
        self.domain.check(&mu)?;
        Ok(mu)
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Seeds used at a noise level: noise-free data needs only one run.
    pub fn seeds_for(&self, noise: f64) -> Vec<u64> {
        if noise > 0.0 {
            self.seeds.clone()
        } else {
            vec![self.seeds.first().copied().unwrap_or(0)]
        }
    }
}

/// Clean training trajectories and the target state.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub params: Vec<ParameterVector>,
    pub clean: Vec<SnapshotMatrix>,
    pub target_mu: ParameterVector,
    pub target_state: DVector<f64>,
}

impl PreparedData {
    pub fn objective(&self) -> TargetMismatch {
        TargetMismatch::new(self.target_state.clone())
    }
}

/// Runs the FOM at every training parameter and at the target. With a cache
/// directory, trajectories already on disk for the same parameter are reused.
pub fn prepare(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<PreparedData> {
    let params = cfg.training.params()?;
    let target_mu = cfg.target_mu()?;
    let mut jobs: Vec<(String, ParameterVector)> = params
        .iter()
        .enumerate()
        .map(|(k, p)| (format!("train_{k:03}.bin"), p.clone()))
        .collect();
    jobs.push(("target.bin".into(), target_mu.clone()));
    let mut solved = jobs
        .par_iter()
        .map(|(name, mu)| cached_solve(mu, &cfg.burgers, cache.map(|d| d.join(name))))
        .collect::<Result<Vec<_>>>()?;
    let target_state = solved.pop().expect("target job").final_state();
    Ok(PreparedData {
        params,
        clean: solved,
        target_mu,
        target_state,
    })
}

/// FOM trajectory at `mu`, read from `path` when a matching file is there
/// and written to it otherwise.
pub fn cached_solve(mu: &ParameterVector, burgers: &BurgersConfig, path: Option<PathBuf>) -> Result<SnapshotMatrix> {
    if let Some(p) = &path {
        if p.exists() {
            if let Ok(s) = read_snapshot(p) {
                if s.mu() == Some(mu) && *s.grid() == burgers.grid && s.state_dim() == burgers.n_points() {
                    return Ok(s);
                }
            }
        }
    }
    let s = fom_solve(mu, burgers)?;
    if let Some(p) = &path {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        write_snapshot(&s, p)?;
    }
    Ok(s)
}

fn trajectory_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)
}

/// Independent noise on each trajectory; a zero ratio returns the clean data.
pub fn noisy_training(
    clean: &[SnapshotMatrix],
    ratio: f64,
    seed: u64,
    scale: NoiseScale,
) -> Result<Vec<SnapshotMatrix>> {
    if ratio == 0.0 {
        return Ok(clean.to_vec());
    }
    clean
        .iter()
        .enumerate()
        .map(|(k, s)| Ok(inject_noise(s, &NoiseSpec::new(ratio, trajectory_seed(seed, k))?.with_scale(scale))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainedSurrogate {
    pub model: LatentModel,
    pub form: DynamicsForm,
    pub hyper: ProviderHyper,
    pub train_seconds: f64,
}

/// Compression, latent dynamics identification, and coefficient provider.
pub fn train_surrogate(
    spec: &SurrogateSpec,
    form: DynamicsForm,
    criterion: ReducerCriterion,
    burgers: &BurgersConfig,
    params: &[ParameterVector],
    snapshots: &[SnapshotMatrix],
) -> Result<TrainedSurrogate> {
    let start = Instant::now();
    if params.len() != snapshots.len() {
        return Err(Error::dim("training parameters", snapshots.len(), params.len()));
    }
    let reducer = pod_fit_snapshots(snapshots, criterion, spec.center)?;
    let latents = snapshots
        .iter()
        .map(|s| reducer.encode_rows(s.data()))
        .collect::<Result<Vec<_>>>()?;
    let grid = burgers.grid;
    let identifier = match form {
        DynamicsForm::Weak => Identifier::Weak(build_test_functions(&grid, &spec.test_functions)?),
        DynamicsForm::Strong => Identifier::Strong(grid),
    };
    let nz = reducer.latent_dim();
    let nd = params.first().map_or(0, ParameterVector::len);
    let (library, provider) = match spec.provider {
        ProviderKind::Global => {
            let lib = FeatureLibrary::new(nz, spec.degree)?;
            let p = fit_global(&latents, &lib, &identifier)?;
            (lib, p)
        }
        ProviderKind::Implicit => {
            let lib = FeatureLibrary::augmented(nz, nd, spec.degree)?;
            let p = fit_implicit(&latents, params, &lib, &identifier)?;
            (lib, p)
        }
        kind => {
            let lib = FeatureLibrary::new(nz, spec.degree)?;
            let tc = TrainingCoefficients::fit_local(&latents, params, &lib, &identifier)?;
            (lib, local_provider(kind, tc, &spec.hyper)?)
        }
    };
    let model = LatentModel::new(
        reducer,
        library,
        provider,
        spec.integrator.tableau(),
        grid,
        Arc::new(*burgers),
    )?;
    Ok(TrainedSurrogate {
        model,
        form,
        hyper: spec.hyper,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

fn local_provider(kind: ProviderKind, tc: TrainingCoefficients, hyper: &ProviderHyper) -> Result<CoefficientProvider> {
    match kind {
        ProviderKind::Rbf => fit_rbf(tc, hyper.rbf_shape),
        ProviderKind::Convex => fit_convex(tc),
        ProviderKind::Gp => fit_gp(tc, hyper.gp_lengthscale, hyper.gp_jitter),
        ProviderKind::Global | ProviderKind::Implicit => unreachable!("constant providers have no local fits"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleMeta {
    form: DynamicsForm,
    provider: ProviderKind,
    hyper: ProviderHyper,
    latent_dim: usize,
    param_dim: usize,
    augmented: bool,
    degree: u8,
    tableau_a: Vec<Vec<f64>>,
    tableau_b: Vec<f64>,
    burgers: BurgersConfig,
}

const BUNDLE_META: &str = "model.json";
const BUNDLE_REDUCER: &str = "reducer.bin";
const BUNDLE_COEFFS: &str = "coeffs.bin";
const BUNDLE_PARAMS: &str = "params.bin";

/// Writes the model into `dir`. Interpolating providers are stored as their
/// training coefficients and refit on load, which is deterministic.
pub fn save_model(trained: &TrainedSurrogate, burgers: &BurgersConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = &trained.model;
    let tab = m.tableau();
    let s = tab.stages();
    let meta = BundleMeta {
        form: trained.form,
        provider: m.provider().kind(),
        hyper: trained.hyper,
        latent_dim: m.library().latent_dim(),
        param_dim: m.param_dim(),
        augmented: m.library().is_augmented(),
        degree: m.library().degree(),
        tableau_a: (0..s).map(|j| (0..s).map(|i| tab.a(j, i)).collect()).collect(),
        tableau_b: (0..s).map(|j| tab.b(j)).collect(),
        burgers: *burgers,
    };
    if meta.burgers.grid != *m.grid() {
        return Err(Error::Config("model grid differs from the Burgers configuration".into()));
    }
    fs::write(dir.join(BUNDLE_META), serde_json::to_vec_pretty(&meta)?)?;
    m.reducer().save(&dir.join(BUNDLE_REDUCER))?;
    match m.provider() {
        CoefficientProvider::Global { w } | CoefficientProvider::Implicit { w, .. } => {
            write_matrix(&dir.join(BUNDLE_COEFFS), w)?;
        }
        p => {
            let tc = p.training().expect("interpolating providers keep their training data");
            let n = tc.coeffs[0].len();
            let stacked = DMatrix::from_fn(tc.coeffs.len(), n, |k, e| tc.coeffs[k].as_slice()[e]);
            let params = DMatrix::from_fn(tc.params.len(), tc.param_dim(), |k, i| tc.params[k][i]);
            write_matrix(&dir.join(BUNDLE_COEFFS), &stacked)?;
            write_matrix(&dir.join(BUNDLE_PARAMS), &params)?;
        }
    }
    write_sidecar(&dir.join(BUNDLE_COEFFS), &m.provider().shape())?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(TrainedSurrogate, BurgersConfig)> {
    let meta_path = dir.join(BUNDLE_META);
    let meta: BundleMeta = serde_json::from_slice(&fs::read(&meta_path)?).map_err(|e| Error::Format {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    let reducer = LinearReducer::load(&dir.join(BUNDLE_REDUCER))?;
    let library = if meta.augmented {
        FeatureLibrary::augmented(meta.latent_dim, meta.param_dim, meta.degree)?
    } else {
        FeatureLibrary::new(meta.latent_dim, meta.degree)?
    };
    let coeff_path = dir.join(BUNDLE_COEFFS);
    let (rows, cols): (usize, usize) = read_sidecar(&coeff_path)?;
    let coeffs = read_matrix(&coeff_path)?;
    let provider = match meta.provider {
        ProviderKind::Global => CoefficientProvider::Global { w: coeffs },
        ProviderKind::Implicit => CoefficientProvider::Implicit {
            w: coeffs,
            param_dim: meta.param_dim,
        },
        kind => {
            let params = read_matrix(&dir.join(BUNDLE_PARAMS))?;
            if params.nrows() != coeffs.nrows() || coeffs.ncols() != rows * cols {
                return Err(Error::Consistency {
                    path: coeff_path,
                    reason: "training coefficients and parameters disagree".into(),
                });
            }
            let ps = (0..params.nrows())
                .map(|k| ParameterVector::from_vector(params.row(k).transpose()))
                .collect::<Result<Vec<_>>>()?;
            let ws = (0..coeffs.nrows())
                .map(|k| DMatrix::from_iterator(rows, cols, coeffs.row(k).iter().copied()))
                .collect();
            local_provider(kind, TrainingCoefficients::new(ps, ws)?, &meta.hyper)?
        }
    };
    let tableau = ButcherTableau::new(meta.tableau_a.clone(), meta.tableau_b.clone())?;
    let model = LatentModel::new(
        reducer,
        library,
        provider,
        tableau,
        meta.burgers.grid,
        Arc::new(meta.burgers),
    )
    .map_err(|e| Error::Consistency {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((
        TrainedSurrogate {
            model,
            form: meta.form,
            hyper: meta.hyper,
            train_seconds: 0.0,
        },
        meta.burgers,
    ))
}

/// Minimizes the surrogate objective with the chosen optimizer and gradient
/// route.
pub fn optimize_surrogate(
    model: &LatentModel,
    objective: &TargetMismatch,
    kind: OptimizerKind,
    gradient: GradientMethod,
    cfg: &ExperimentConfig,
) -> Result<OptResult> {
    let f = |mu: &ParameterVector| surrogate_objective(model, mu, objective);
    let g = |mu: &ParameterVector| {
        let r = match gradient {
            GradientMethod::ReducedDirect => reduced_direct_gradient(model, mu, objective)?,
            _ => reduced_adjoint_gradient(model, mu, objective)?,
        };
        Ok((r.value, r.gradient))
    };
    let problem = OptProblem::new(cfg.domain.clone(), cfg.x0()?, &f)?.with_gradient(&g);
    minimize(kind, &problem, &cfg.optimizer_settings)
}

/// Optimizes the full-order objective directly (adjoint gradients).
pub fn optimize_fom(objective: &TargetMismatch, kind: OptimizerKind, cfg: &ExperimentConfig) -> Result<OptResult> {
    let f = |mu: &ParameterVector| fom_objective(mu, &cfg.burgers, objective);
    let g = |mu: &ParameterVector| {
        let r = fom_gradient_adjoint(mu, &cfg.burgers, objective)?;
        Ok((r.value, r.gradient))
    };
    let problem = OptProblem::new(cfg.domain.clone(), cfg.x0()?, &f)?.with_gradient(&g);
    minimize(kind, &problem, &cfg.optimizer_settings)
}

/// The objective-interpolation baseline: `f(ũ_N^{(k)})` at the training
/// points, interpolated and minimized without gradients.
pub fn optimize_rbf_objective(
    params: &[ParameterVector],
    training: &[SnapshotMatrix],
    objective: &TargetMismatch,
    kind: OptimizerKind,
    cfg: &ExperimentConfig,
) -> Result<(OptResult, f64)> {
    let start = Instant::now();
    let fs = training
        .iter()
        .map(|s| Ok((s.final_state() - objective.target()).norm_squared()))
        .collect::<Result<Vec<f64>>>()?;
    let surrogate = rbf_objective_surrogate(params, &fs, cfg.surrogate.hyper.rbf_shape)?;
    let train_s = start.elapsed().as_secs_f64();
    let f = |mu: &ParameterVector| surrogate.eval(mu);
    let g = |mu: &ParameterVector| Ok((surrogate.eval(mu)?, surrogate.gradient(mu)?));
    let problem = OptProblem::new(cfg.domain.clone(), cfg.x0()?, &f)?.with_gradient(&g);
    Ok((minimize(kind, &problem, &cfg.optimizer_settings)?, train_s))
}

/// `(E₂ in percent, f(u_N(μ̂)))` with the noise-free FOM.
pub fn assess(mu_hat: &ParameterVector, data: &PreparedData, burgers: &BurgersConfig) -> Result<(f64, f64)> {
    let e2 = 100.0 * relative_param_error(mu_hat, &data.target_mu)?;
    let f_true = fom_objective(mu_hat, burgers, &data.objective())?;
    Ok((e2, f_true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub noise: f64,
    pub seed: u64,
    pub method: Method,
    pub optimizer: OptimizerKind,
    pub e2_percent: f64,
    pub f_true: f64,
    pub train_s: f64,
    pub opt_s: f64,
    pub n_func: usize,
    pub n_grad: usize,
    pub mu_hat: Vec<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

impl BenchRow {
    fn failed(noise: f64, seed: u64, method: Method, optimizer: OptimizerKind, train_s: f64, err: &Error) -> Self {
        Self {
            noise,
            seed,
            method,
            optimizer,
            e2_percent: f64::NAN,
            f_true: f64::NAN,
            train_s,
            opt_s: f64::NAN,
            n_func: 0,
            n_grad: 0,
            mu_hat: Vec::new(),
            converged: false,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<BenchRow>,
}

pub const CSV_HEADER: &str = "noise,method,optimizer,E2_percent,f_true,train_s,opt_s,n_func,n_grad";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.noise,
                r.method.label(),
                r.optimizer.label(),
                r.e2_percent,
                r.f_true,
                r.train_s,
                r.opt_s,
                r.n_func,
                r.n_grad
            );
        }
        out
    }

    /// Markdown table grouped by noise level.
    pub fn render_table(&self) -> String {
        let mut out = format!("config {}\n\n", self.config_hash);
        out.push_str("| noise | seed | method | optimizer | E2 % | f_true | train s | opt s | func | grad |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {:.0}% | {} | {} | {} | {:.4} | {:.3e} | {:.2} | {:.2} | {} | {} |{}",
                100.0 * r.noise,
                r.seed,
                r.method.label(),
                r.optimizer.label(),
                r.e2_percent,
                r.f_true,
                r.train_s,
                r.opt_s,
                r.n_func,
                r.n_grad,
                r.error.as_deref().map(|e| format!(" {e}")).unwrap_or_default()
            );
        }
        out
    }

    /// Median E₂ over seeds for one (noise, method, optimizer) cell.
    pub fn median_e2(&self, noise: f64, method: Method, optimizer: OptimizerKind) -> Option<f64> {
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.noise == noise && r.method == method && r.optimizer == optimizer)
            .map(|r| r.e2_percent)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("report.md"), self.render_table())?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Two-column `x,u` CSV for final-state overlays.
pub fn final_state_csv(burgers: &BurgersConfig, u: &DVector<f64>) -> String {
    let mut out = String::from("x,u\n");
    for (j, v) in u.iter().enumerate() {
        let _ = writeln!(out, "{},{}", burgers.x(j), v);
    }
    out
}

/// File-name stem shared by a cell's artifacts.
pub fn cell_name(noise: f64, seed: u64, method: Method) -> String {
    format!("noise{:.0}_seed{seed}_{}", 100.0 * noise, method.label())
}

/// One training set (noise level and seed): every requested method and
/// optimizer. Failures are recorded in the row and the run continues.
fn bench_group(cfg: &ExperimentConfig, data: &PreparedData, noise: f64, seed: u64, models: Option<&Path>) -> Vec<BenchRow> {
    let objective = data.objective();
    let training = match noisy_training(&data.clean, noise, seed, cfg.noise_scale) {
        Ok(t) => t,
        Err(e) => {
            return cfg
                .methods
                .iter()
                .flat_map(|&m| cfg.optimizers.iter().map(move |&o| (m, o)))
                .map(|(m, o)| BenchRow::failed(noise, seed, m, o, 0.0, &e))
                .collect()
        }
    };
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let trained = match method.form() {
            Some(form) => Some(train_surrogate(
                &cfg.surrogate,
                form,
                cfg.surrogate.criterion_for(noise),
                &cfg.burgers,
                &data.params,
                &training,
            )
            .and_then(|t| {
                if let Some(dir) = models {
                    save_model(&t, &cfg.burgers, &dir.join(cell_name(noise, seed, method)))?;
                }
                Ok(t)
            })),
            None => None,
        };
        for &optimizer in &cfg.optimizers {
            if optimizer.uses_gradient() && !method.has_gradient() {
                continue;
            }
            let outcome = match (&trained, method) {
                (Some(Ok(t)), _) => optimize_surrogate(&t.model, &objective, optimizer, cfg.gradient, cfg)
                    .map(|r| (r, t.train_seconds)),
                (Some(Err(e)), _) => Err(Error::Domain(format!("training failed: {e}"))),
                (None, Method::RbfObjective) => {
                    optimize_rbf_objective(&data.params, &training, &objective, optimizer, cfg)
                }
                (None, _) => optimize_fom(&objective, optimizer, cfg).map(|r| (r, 0.0)),
            };
            let row = outcome.and_then(|(r, train_s)| {
                let (e2, f_true) = assess(&r.mu_hat, data, &cfg.burgers)?;
                Ok(BenchRow {
                    noise,
                    seed,
                    method,
                    optimizer,
                    e2_percent: e2,
                    f_true,
                    train_s,
                    opt_s: r.wall_seconds,
                    n_func: r.n_func,
                    n_grad: r.n_grad,
                    mu_hat: r.mu_hat.as_slice().to_vec(),
                    converged: r.converged,
                    error: None,
                })
            });
            rows.push(row.unwrap_or_else(|e| {
                log::warn!("cell noise={noise} seed={seed} {} {} failed: {e}", method.label(), optimizer.label());
                let train_s = match &trained {
                    Some(Ok(t)) => t.train_seconds,
                    _ => 0.0,
                };
                BenchRow::failed(noise, seed, method, optimizer, train_s, &e)
            }));
        }
    }
    rows
}

/// Runs the full report matrix; groups run in parallel and rows keep the
/// configured order. With `models`, every trained surrogate is saved there
/// under [`cell_name`].
pub fn run_bench(cfg: &ExperimentConfig, data: &PreparedData, models: Option<&Path>) -> BenchReport {
    let groups: Vec<(f64, u64)> = cfg
        .noise_ratios
        .iter()
        .flat_map(|&n| cfg.seeds_for(n).into_iter().map(move |s| (n, s)))
        .collect();
    let rows = groups
        .par_iter()
        .map(|&(noise, seed)| bench_group(cfg, data, noise, seed, models))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    BenchReport {
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        rows,
    }
}

//! Coefficient providers: `W(μ)` and `∂W/∂μ_i` for the latent vector field.
//!
//! Global and implicit providers hold one constant `W`. The interpolating
//! providers (RBF, convex Mahalanobis, GP) fit one `W^{(k)}` per training
//! parameter and blend them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ParameterVector;
use crate::dynamics::{FeatureLibrary, Identifier};
use crate::error::{Error, Result};
use crate::interp::{GpInterpolant, RbfInterpolant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Global,
    #[default]
    Implicit,
    Rbf,
    Convex,
    Gp,
}

impl ProviderKind {
    pub fn needs_local_fits(&self) -> bool {
        matches!(self, ProviderKind::Rbf | ProviderKind::Convex | ProviderKind::Gp)
    }
}

/// Kernel settings for the interpolating providers; `None` picks the
/// data-driven default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProviderHyper {
    #[serde(default)]
    pub rbf_shape: Option<f64>,
    #[serde(default)]
    pub gp_lengthscale: Option<f64>,
    #[serde(default = "default_gp_jitter")]
    pub gp_jitter: f64,
}

fn default_gp_jitter() -> f64 {
    1e-8
}

impl Default for ProviderHyper {
    fn default() -> Self {
        Self {
            rbf_shape: None,
            gp_lengthscale: None,
            gp_jitter: default_gp_jitter(),
        }
    }
}

/// Per-parameter fits `{(μ^{(k)}, W^{(k)})}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCoefficients {
    pub params: Vec<ParameterVector>,
    pub coeffs: Vec<DMatrix<f64>>,
}

impl TrainingCoefficients {
    pub fn new(params: Vec<ParameterVector>, coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        if params.len() != coeffs.len() {
            return Err(Error::dim("training coefficient count", params.len(), coeffs.len()));
        }
        let (Some(p0), Some(w0)) = (params.first(), coeffs.first()) else {
            return Err(Error::Domain("no training coefficients".into()));
        };
        for p in &params {
            if p.len() != p0.len() {
                return Err(Error::dim("training parameter", p0.len(), p.len()));
            }
        }
        for w in &coeffs {
            if w.shape() != w0.shape() {
                return Err(Error::dim("training coefficient columns", w0.ncols(), w.ncols()));
            }
        }
        Ok(Self { params, coeffs })
    }

    /// Fits one `W^{(k)}` per trajectory.
    pub fn fit_local(
        latents: &[DMatrix<f64>],
        params: &[ParameterVector],
        lib: &FeatureLibrary,
        identifier: &Identifier,
    ) -> Result<Self> {
        if latents.len() != params.len() {
            return Err(Error::dim("parameters per trajectory", latents.len(), params.len()));
        }
        let coeffs = latents
            .par_iter()
            .map(|z| identifier.fit(std::slice::from_ref(z), lib).map(|d| d.w))
            .collect::<Result<Vec<_>>>()?;
        Self::new(params.to_vec(), coeffs)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.coeffs[0].shape()
    }

    pub fn param_dim(&self) -> usize {
        self.params[0].len()
    }

    fn centers(&self) -> Vec<DVector<f64>> {
        self.params.iter().map(|p| p.as_vector().clone()).collect()
    }

    /// `K × (J·d)`, each row a column-major vectorized `W^{(k)}`.
    fn stacked(&self) -> DMatrix<f64> {
        let n = self.coeffs[0].len();
        DMatrix::from_fn(self.coeffs.len(), n, |k, e| self.coeffs[k].as_slice()[e])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbfProvider {
    training: TrainingCoefficients,
    interp: RbfInterpolant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpProvider {
    training: TrainingCoefficients,
    interp: GpInterpolant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexProvider {
    training: TrainingCoefficients,
    cov_inv: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientProvider {
    Global { w: DMatrix<f64> },
    /// `W` acting on `[z; μ]`.
    Implicit { w: DMatrix<f64>, param_dim: usize },
    Rbf(RbfProvider),
    Convex(ConvexProvider),
    Gp(GpProvider),
}

pub fn fit_global(
    latents: &[DMatrix<f64>],
    lib: &FeatureLibrary,
    identifier: &Identifier,
) -> Result<CoefficientProvider> {
    if lib.is_augmented() {
        return Err(Error::Config("global provider takes a non-augmented library".into()));
    }
    let fit = identifier.fit(latents, lib)?;
    Ok(CoefficientProvider::Global { w: fit.w })
}

/// `[Z | 1·μᵀ]`: the trajectory with its constant parameter appended.
pub fn augment(z: &DMatrix<f64>, mu: &ParameterVector) -> DMatrix<f64> {
    let (rows, nz) = z.shape();
    DMatrix::from_fn(rows, nz + mu.len(), |r, c| if c < nz { z[(r, c)] } else { mu[c - nz] })
}

pub fn fit_implicit(
    latents: &[DMatrix<f64>],
    params: &[ParameterVector],
    lib: &FeatureLibrary,
    identifier: &Identifier,
) -> Result<CoefficientProvider> {
    if latents.len() != params.len() {
        return Err(Error::dim("parameters per trajectory", latents.len(), params.len()));
    }
    for p in params {
        if p.len() != lib.param_dim() {
            return Err(Error::dim("augmented parameter block", lib.param_dim(), p.len()));
        }
    }
    let augmented: Vec<_> = latents.iter().zip(params).map(|(z, p)| augment(z, p)).collect();
    let fit = identifier.fit(&augmented, lib)?;
    Ok(CoefficientProvider::Implicit {
        w: fit.w,
        param_dim: lib.param_dim(),
    })
}

pub fn fit_rbf(training: TrainingCoefficients, shape: Option<f64>) -> Result<CoefficientProvider> {
    let interp = RbfInterpolant::fit(&training.centers(), &training.stacked(), shape)?;
    Ok(CoefficientProvider::Rbf(RbfProvider { training, interp }))
}

pub fn fit_gp(training: TrainingCoefficients, lengthscale: Option<f64>, jitter: f64) -> Result<CoefficientProvider> {
    let interp = GpInterpolant::fit(&training.centers(), &training.stacked(), lengthscale, jitter)?;
    Ok(CoefficientProvider::Gp(GpProvider { training, interp }))
}

pub fn fit_convex(training: TrainingCoefficients) -> Result<CoefficientProvider> {
    let k = training.params.len();
    if k < 2 {
        return Err(Error::Domain("convex interpolation needs at least two training points".into()));
    }
    let nd = training.param_dim();
    let centers = training.centers();
    let mean = centers.iter().fold(DVector::zeros(nd), |a, c| a + c) / k as f64;
    let mut cov = DMatrix::zeros(nd, nd);
    for c in &centers {
        let d = c - &mean;
        cov += &d * d.transpose();
    }
    cov /= (k - 1) as f64;
    let trace = cov.trace();
    if !(trace > 0.0) {
        return Err(Error::Singular("training parameters have zero spread".into()));
    }
    let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
    if min_eig <= 1e-12 * trace {
        cov += DMatrix::identity(nd, nd) * (1e-10 * trace / nd as f64);
    }
    let cov_inv = cov
        .cholesky()
        .ok_or_else(|| Error::Singular("parameter covariance after jitter".into()))?
        .inverse();
    Ok(CoefficientProvider::Convex(ConvexProvider { training, cov_inv }))
}

/// Below this squared Mahalanobis distance a query counts as a training point.
const CONVEX_COINCIDENT: f64 = 1e-280;

impl ConvexProvider {
    fn offsets(&self, mu: &DVector<f64>) -> Vec<(f64, DVector<f64>)> {
        self.training
            .params
            .iter()
            .map(|p| {
                let d = mu - p.as_vector();
                let sd = &self.cov_inv * &d;
                (d.dot(&sd), sd)
            })
            .collect()
    }

    /// Normalized inverse-square Mahalanobis weights `β^{(k)}`.
    pub fn weights(&self, mu: &DVector<f64>) -> DVector<f64> {
        let offsets = self.offsets(mu);
        let k = offsets.len();
        if let Some(hit) = offsets.iter().position(|(r2, _)| *r2 <= CONVEX_COINCIDENT) {
            return DVector::from_fn(k, |j, _| if j == hit { 1.0 } else { 0.0 });
        }
        // Scale by the smallest distance so the weights never overflow.
        let rmin = offsets.iter().map(|(r2, _)| *r2).fold(f64::INFINITY, f64::min);
        let q = DVector::from_iterator(k, offsets.iter().map(|(r2, _)| rmin / r2));
        let s = q.sum();
        q / s
    }

    fn eval(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        let beta = self.weights(mu);
        blend(&self.training.coeffs, &beta)
    }

    fn gradient(&self, mu: &DVector<f64>, i: usize) -> DMatrix<f64> {
        let offsets = self.offsets(mu);
        if offsets.iter().any(|(r2, _)| *r2 <= CONVEX_COINCIDENT) {
            // Closed form is undefined at r = 0: forward difference instead.
            let h = 1e-7 * mu[i].abs().max(1.0);
            let mut mp = mu.clone();
            mp[i] += h;
            return (self.eval(&mp) - self.eval(mu)) / h;
        }
        // q_k = r_k⁻², ∂q_k/∂μ_i = −2(S⁻¹(μ − μ_k))_i / r_k⁴.
        let q: Vec<f64> = offsets.iter().map(|(r2, _)| 1.0 / r2).collect();
        let dq: Vec<f64> = offsets.iter().map(|(r2, sd)| -2.0 * sd[i] / (r2 * r2)).collect();
        let s: f64 = q.iter().sum();
        let ds: f64 = dq.iter().sum();
        let dbeta = DVector::from_fn(q.len(), |k, _| (dq[k] * s - q[k] * ds) / (s * s));
        blend(&self.training.coeffs, &dbeta)
    }
}

fn blend(coeffs: &[DMatrix<f64>], weights: &DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(coeffs[0].nrows(), coeffs[0].ncols());
    for (w, c) in weights.iter().zip(coeffs) {
        if *w != 0.0 {
            out += c * *w;
        }
    }
    out
}

fn unvec(v: DVector<f64>, (r, c): (usize, usize)) -> DMatrix<f64> {
    DMatrix::from_vec(r, c, v.data.into())
}

impl CoefficientProvider {
    pub fn kind(&self) -> ProviderKind {
        match self {
            CoefficientProvider::Global { .. } => ProviderKind::Global,
            CoefficientProvider::Implicit { .. } => ProviderKind::Implicit,
            CoefficientProvider::Rbf(_) => ProviderKind::Rbf,
            CoefficientProvider::Convex(_) => ProviderKind::Convex,
            CoefficientProvider::Gp(_) => ProviderKind::Gp,
        }
    }

    /// `(J, d)` of the coefficient matrix.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            CoefficientProvider::Global { w } | CoefficientProvider::Implicit { w, .. } => w.shape(),
            CoefficientProvider::Rbf(p) => p.training.shape(),
            CoefficientProvider::Convex(p) => p.training.shape(),
            CoefficientProvider::Gp(p) => p.training.shape(),
        }
    }

    /// Number of parameters `μ` the provider reads, if it reads any
    /// (`None` for the global provider, which accepts any `μ`).
    pub fn param_dim(&self) -> Option<usize> {
        match self {
            CoefficientProvider::Global { .. } => None,
            CoefficientProvider::Implicit { param_dim, .. } => Some(*param_dim),
            CoefficientProvider::Rbf(p) => Some(p.training.param_dim()),
            CoefficientProvider::Convex(p) => Some(p.training.param_dim()),
            CoefficientProvider::Gp(p) => Some(p.training.param_dim()),
        }
    }

    /// True when `∂W/∂μ ≡ 0`.
    pub fn is_parameter_free(&self) -> bool {
        matches!(
            self,
            CoefficientProvider::Global { .. } | CoefficientProvider::Implicit { .. }
        )
    }

    pub fn training(&self) -> Option<&TrainingCoefficients> {
        match self {
            CoefficientProvider::Rbf(p) => Some(&p.training),
            CoefficientProvider::Convex(p) => Some(&p.training),
            CoefficientProvider::Gp(p) => Some(&p.training),
            _ => None,
        }
    }

    fn check_mu(&self, mu: &ParameterVector) -> Result<()> {
        match self.param_dim() {
            Some(n) if n != mu.len() => Err(Error::dim("provider parameter", n, mu.len())),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, mu: &ParameterVector) -> Result<DMatrix<f64>> {
        self.check_mu(mu)?;
        let x = mu.as_vector();
        Ok(match self {
            CoefficientProvider::Global { w } | CoefficientProvider::Implicit { w, .. } => w.clone(),
            CoefficientProvider::Rbf(p) => unvec(p.interp.eval(x)?, p.training.shape()),
            CoefficientProvider::Convex(p) => p.eval(x),
            CoefficientProvider::Gp(p) => unvec(p.interp.eval(x)?, p.training.shape()),
        })
    }

    /// `∂W/∂μ_i`.
    pub fn gradient(&self, mu: &ParameterVector, i: usize) -> Result<DMatrix<f64>> {
        self.check_mu(mu)?;
        if i >= mu.len() {
            return Err(Error::Domain(format!("gradient index {i} out of range 0..{}", mu.len())));
        }
        let x = mu.as_vector();
        let (r, c) = self.shape();
        Ok(match self {
            CoefficientProvider::Global { .. } | CoefficientProvider::Implicit { .. } => DMatrix::zeros(r, c),
            CoefficientProvider::Rbf(p) => unvec(p.interp.gradient(x, i)?, (r, c)),
            CoefficientProvider::Convex(p) => p.gradient(x, i),
            CoefficientProvider::Gp(p) => unvec(p.interp.gradient(x, i)?, (r, c)),
        })
    }

    /// Convex weights at `μ` (only for the convex provider).
    pub fn convex_weights(&self, mu: &ParameterVector) -> Option<DVector<f64>> {
        match self {
            CoefficientProvider::Convex(p) => Some(p.weights(mu.as_vector())),
            _ => None,
        }
    }
}

//! Domain types shared by every stage of the pipeline: design parameters,
//! time grids, snapshot trajectories, and the noise model applied to
//! training data.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Design variables `μ`. Always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParameterVector(DVector<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::from_vector(DVector::from_vec(values))
    }

    pub fn from_vector(values: DVector<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite parameter entry {bad}")));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    /// Copy with entry `i` shifted by `h`.
    pub fn perturbed(&self, i: usize, h: f64) -> Result<Self> {
        let mut v = self.0.clone();
        v[i] += h;
        Self::from_vector(v)
    }
}

impl std::ops::Index<usize> for ParameterVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for ParameterVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(p: ParameterVector) -> Self {
        p.0.as_slice().to_vec()
    }
}

/// Box-shaped admissible set `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDomain", into = "RawDomain")]
pub struct ParameterDomain {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawDomain> for ParameterDomain {
    type Error = Error;

    fn try_from(r: RawDomain) -> Result<Self> {
        ParameterDomain::new(r.lower, r.upper)
    }
}

impl From<ParameterDomain> for RawDomain {
    fn from(d: ParameterDomain) -> Self {
        RawDomain {
            lower: d.lower.as_slice().to_vec(),
            upper: d.upper.as_slice().to_vec(),
        }
    }
}

impl ParameterDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim("domain upper bounds", lower.len(), upper.len()));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Domain(format!(
                    "domain bound {i} requires lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self {
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
        })
    }

    /// The Burgers benchmark box `[0.7,0.9]×[0.9,1.1]×[0.7,0.9]×[0.9,1.1]`.
    pub fn burgers() -> Self {
        Self::new(vec![0.7, 0.9, 0.7, 0.9], vec![0.9, 1.1, 0.9, 1.1]).expect("valid box")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn center(&self) -> ParameterVector {
        ParameterVector((&self.lower + &self.upper) * 0.5)
    }

    pub fn contains(&self, mu: &ParameterVector) -> bool {
        mu.len() == self.dim()
            && mu
                .as_slice()
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Componentwise projection onto the box.
    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(v, (lo, hi))| v.clamp(*lo, *hi)),
        )
    }

    /// Euclidean distance from `x` to the box.
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        (x - self.clamp(x)).norm()
    }

    pub fn check(&self, mu: &ParameterVector) -> Result<()> {
        if mu.len() != self.dim() {
            return Err(Error::dim("parameter vector", self.dim(), mu.len()));
        }
        Ok(())
    }
}

/// Uniform time grid `t_n = n·Δt`, `n = 0..=steps`, `Δt = t_final / steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_final: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, steps: usize) -> Result<Self> {
        if !(t_final.is_finite() && t_final > 0.0) || steps == 0 {
            return Err(Error::Config(format!(
                "time grid needs t_final > 0 and steps >= 1, got T = {t_final}, N = {steps}"
            )));
        }
        Ok(Self { t_final, steps })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A trajectory `U ∈ R^{(N+1)×N_u}`; row `n` holds the state at `t_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    data: DMatrix<f64>,
    grid: TimeGrid,
    mu: Option<ParameterVector>,
}

impl SnapshotMatrix {
    pub fn new(data: DMatrix<f64>, grid: TimeGrid, mu: Option<ParameterVector>) -> Result<Self> {
        if data.nrows() != grid.len() {
            return Err(Error::dim("snapshot rows", grid.len(), data.nrows()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("snapshot contains non-finite values".into()));
        }
        Ok(Self { data, grid, mu })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn mu(&self) -> Option<&ParameterVector> {
        self.mu.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn state(&self, n: usize) -> DVector<f64> {
        self.data.row(n).transpose()
    }

    pub fn final_state(&self) -> DVector<f64> {
        self.state(self.grid.steps())
    }
}

/// How the noise standard deviation is tied to the data magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// `σ = ratio · ‖U‖_F / sqrt(#entries)`, i.e. ratio times the RMS entry.
    #[default]
    Rms,
    /// `σ = ratio · ‖U‖_F`, the global Frobenius scale.
    Frobenius,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub ratio: f64,
    pub seed: u64,
    #[serde(default)]
    pub scale: NoiseScale,
}

impl NoiseSpec {
    pub fn new(ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio.is_finite() && ratio >= 0.0) {
            return Err(Error::Domain(format!("noise ratio must be >= 0, got {ratio}")));
        }
        Ok(Self {
            ratio,
            seed,
            scale: NoiseScale::Rms,
        })
    }

    pub fn with_scale(mut self, scale: NoiseScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn sigma(&self, data: &DMatrix<f64>) -> f64 {
        let fro = data.norm();
        match self.scale {
            NoiseScale::Rms => {
                let n = data.len().max(1) as f64;
                self.ratio * fro / n.sqrt()
            }
            NoiseScale::Frobenius => self.ratio * fro,
        }
    }
}

/// Adds i.i.d. zero-mean Gaussian noise entrywise. Deterministic in
/// `spec.seed`; draws are consumed in row-major order.
pub fn inject_noise(snapshots: &SnapshotMatrix, spec: &NoiseSpec) -> SnapshotMatrix {
    let mut out = snapshots.clone();
    if spec.ratio == 0.0 {
        return out;
    }
    let sigma = spec.sigma(&snapshots.data);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, cols) = out.data.shape();
    for r in 0..rows {
        for c in 0..cols {
            let e: f64 = StandardNormal.sample(&mut rng);
            out.data[(r, c)] += sigma * e;
        }
    }
    out
}

/// `‖μ̂ − μ*‖₂ / ‖μ*‖₂`.
pub fn relative_param_error(mu_hat: &ParameterVector, mu_star: &ParameterVector) -> Result<f64> {
    if mu_hat.len() != mu_star.len() {
        return Err(Error::dim("estimated parameter", mu_star.len(), mu_hat.len()));
    }
    let denom = mu_star.as_vector().norm();
    if denom == 0.0 {
        return Err(Error::DivisionByZero("reference parameter has zero norm"));
    }
    Ok((mu_hat.as_vector() - mu_star.as_vector()).norm() / denom)
}

/// A parameterized full-order initial state `g(μ)` with analytic partials.
pub trait InitialCondition: Send + Sync {
    fn param_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn eval(&self, mu: &ParameterVector) -> Result<DVector<f64>>;
    /// `∂g/∂μ_i`.
    fn gradient(&self, mu: &ParameterVector, i: usize) -> Result<DVector<f64>>;
}

//! Scattered-data interpolation over parameter space with analytic
//! gradients: Gaussian radial basis functions and the Gaussian-process
//! predictive mean. Both interpolate vector-valued data (one output per
//! column of the training values).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn check_centers(centers: &[DVector<f64>], values: &DMatrix<f64>) -> Result<usize> {
    let first = centers
        .first()
        .ok_or_else(|| Error::Domain("interpolation needs at least one training point".into()))?;
    let dim = first.len();
    if values.nrows() != centers.len() {
        return Err(Error::dim("training value rows", centers.len(), values.nrows()));
    }
    for c in centers {
        if c.len() != dim {
            return Err(Error::dim("training point", dim, c.len()));
        }
    }
    for a in 0..centers.len() {
        for b in a + 1..centers.len() {
            if centers[a] == centers[b] {
                return Err(Error::Singular(format!(
                    "duplicate training points {a} and {b}"
                )));
            }
        }
    }
    Ok(dim)
}

fn pairwise_distances(centers: &[DVector<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for a in 0..centers.len() {
        for b in a + 1..centers.len() {
            out.push((&centers[a] - &centers[b]).norm());
        }
    }
    out
}

/// `1 / median pairwise distance`; 1 for a single point.
pub fn default_rbf_shape(centers: &[DVector<f64>]) -> f64 {
    let mut d = pairwise_distances(centers);
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if median > 0.0 {
        1.0 / median
    } else {
        1.0
    }
}

/// Mean distance from each point to its nearest neighbour; 1 for a single point.
pub fn mean_nearest_neighbor(centers: &[DVector<f64>]) -> f64 {
    if centers.len() < 2 {
        return 1.0;
    }
    let total: f64 = centers
        .iter()
        .enumerate()
        .map(|(a, ca)| {
            centers
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != a)
                .map(|(_, cb)| (ca - cb).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / centers.len() as f64
}

/// `w(x) = Σ_k α_k φ(‖x − x_k‖)`, `φ(r) = exp(−(εr)²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfInterpolant {
    centers: Vec<DVector<f64>>,
    weights: DMatrix<f64>,
    shape: f64,
}

impl RbfInterpolant {
    pub fn fit(centers: &[DVector<f64>], values: &DMatrix<f64>, shape: Option<f64>) -> Result<Self> {
        check_centers(centers, values)?;
        let eps = shape.unwrap_or_else(|| default_rbf_shape(centers));
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Config(format!("RBF shape must be positive, got {eps}")));
        }
        let k = centers.len();
        let kernel = DMatrix::from_fn(k, k, |a, b| {
            let r = (&centers[a] - &centers[b]).norm();
            (-(eps * r).powi(2)).exp()
        });
        let weights = kernel
            .lu()
            .solve(values)
            .ok_or_else(|| Error::Singular("RBF kernel matrix".into()))?;
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("RBF kernel matrix".into()));
        }
        Ok(Self {
            centers: centers.to_vec(),
            weights,
            shape: eps,
        })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn input_dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn kernels(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("interpolation point", self.input_dim(), x.len()));
        }
        Ok(DVector::from_iterator(
            self.centers.len(),
            self.centers
                .iter()
                .map(|c| (-(self.shape * (x - c).norm()).powi(2)).exp()),
        ))
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.weights.tr_mul(&self.kernels(x)?))
    }

    /// `∂w/∂x_i = Σ_k α_k φ′(r_k)/r_k·(x_i − x_{k,i})`; for the Gaussian
    /// `φ′(r)/r = −2ε²φ(r)`, finite at `r = 0`.
    pub fn gradient(&self, x: &DVector<f64>, i: usize) -> Result<DVector<f64>> {
        if i >= self.input_dim() {
            return Err(Error::Domain(format!("gradient index {i} out of range")));
        }
        let phi = self.kernels(x)?;
        let e2 = self.shape * self.shape;
        let factors = DVector::from_fn(self.centers.len(), |k, _| {
            -2.0 * e2 * phi[k] * (x[i] - self.centers[k][i])
        });
        Ok(self.weights.tr_mul(&factors))
    }
}

/// Predictive mean of independent zero-mean GPs, one per output, with a
/// squared-exponential kernel `γ_e·exp(−‖x − x′‖²/(2λ²))` whose amplitude is
/// the sample variance of that output.
#[derive(Debug, Clone, PartialEq)]
pub struct GpInterpolant {
    centers: Vec<DVector<f64>>,
    alpha: DMatrix<f64>,
    gamma: DVector<f64>,
    lengthscale: f64,
    jitter: f64,
}

impl GpInterpolant {
    /// `jitter` is relative to each output's amplitude.
    pub fn fit(
        centers: &[DVector<f64>],
        values: &DMatrix<f64>,
        lengthscale: Option<f64>,
        jitter: f64,
    ) -> Result<Self> {
        check_centers(centers, values)?;
        let lambda = lengthscale.unwrap_or_else(|| mean_nearest_neighbor(centers));
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Config(format!("GP lengthscale must be positive, got {lambda}")));
        }
        if !(jitter.is_finite() && jitter >= 0.0) {
            return Err(Error::Config(format!("GP jitter must be >= 0, got {jitter}")));
        }
        let k = centers.len();
        let m = values.ncols();
        let gamma = DVector::from_fn(m, |e, _| {
            let col = values.column(e);
            let var = if k > 1 { col.variance() * k as f64 / (k - 1) as f64 } else { 0.0 };
            if var > 0.0 && var.is_finite() {
                var
            } else {
                1.0
            }
        });
        // (γC + jitter·γI)α = w  ⇔  α = (C + jitter·I)⁻¹w / γ.
        let corr = DMatrix::from_fn(k, k, |a, b| {
            let d2 = (&centers[a] - &centers[b]).norm_squared();
            (-d2 / (2.0 * lambda * lambda)).exp() + if a == b { jitter } else { 0.0 }
        });
        let chol = corr
            .cholesky()
            .ok_or_else(|| Error::Singular("GP kernel matrix is not positive definite".into()))?;
        let mut alpha = chol.solve(values);
        for e in 0..m {
            alpha.column_mut(e).scale_mut(1.0 / gamma[e]);
        }
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("GP kernel matrix".into()));
        }
        Ok(Self {
            centers: centers.to_vec(),
            alpha,
            gamma,
            lengthscale: lambda,
            jitter,
        })
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn amplitudes(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn input_dim(&self) -> usize {
        self.centers[0].len()
    }

    fn correlations(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("interpolation point", self.input_dim(), x.len()));
        }
        let l2 = 2.0 * self.lengthscale * self.lengthscale;
        Ok(DVector::from_iterator(
            self.centers.len(),
            self.centers.iter().map(|c| (-(x - c).norm_squared() / l2).exp()),
        ))
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.correlations(x)?;
        Ok(self.alpha.tr_mul(&c).component_mul(&self.gamma))
    }

    /// `∂w̄_e/∂x_i = Σ_k α_{ke}·γ_e·c_k(x)·(x_{k,i} − x_i)/λ²`.
    pub fn gradient(&self, x: &DVector<f64>, i: usize) -> Result<DVector<f64>> {
        if i >= self.input_dim() {
            return Err(Error::Domain(format!("gradient index {i} out of range")));
        }
        let c = self.correlations(x)?;
        let l2 = self.lengthscale * self.lengthscale;
        let factors = DVector::from_fn(self.centers.len(), |k, _| {
            c[k] * (self.centers[k][i] - x[i]) / l2
        });
        Ok(self.alpha.tr_mul(&factors).component_mul(&self.gamma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(k: usize, dim: usize, seed: u64) -> (Vec<DVector<f64>>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<_> = (0..k)
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(0.0..1.0)))
            .collect();
        let values = DMatrix::from_fn(k, 3, |a, e| {
            (centers[a].sum() * (e + 1) as f64).sin() + e as f64
        });
        (centers, values)
    }

    fn fd<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, x: &DVector<f64>, i: usize) -> DVector<f64> {
        let h = 1e-6;
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    #[test]
    fn rbf_interpolates_and_differentiates() {
        let (centers, values) = cloud(12, 3, 1);
        let rbf = RbfInterpolant::fit(&centers, &values, None).unwrap();
        for (k, c) in centers.iter().enumerate() {
            let v = rbf.eval(c).unwrap();
            assert!((v - values.row(k).transpose()).amax() <= 1e-8);
        }
        let x = DVector::from_vec(vec![0.4, 0.55, 0.3]);
        for i in 0..3 {
            let g = rbf.gradient(&x, i).unwrap();
            let n = fd(|y| rbf.eval(y).unwrap(), &x, i);
            assert!((&g - &n).amax() <= 1e-5 * g.amax().max(1.0));
        }
    }

    #[test]
    fn single_center_gradient_vanishes_at_center() {
        let c = vec![DVector::from_vec(vec![0.5, 0.5])];
        let v = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
        let rbf = RbfInterpolant::fit(&c, &v, None).unwrap();
        assert_eq!(rbf.gradient(&c[0], 0).unwrap().amax(), 0.0);
        let gp = GpInterpolant::fit(&c, &v, None, 1e-8).unwrap();
        assert_eq!(gp.gradient(&c[0], 1).unwrap().amax(), 0.0);
    }

    #[test]
    fn duplicate_points_are_singular() {
        let c = vec![DVector::from_vec(vec![0.5]), DVector::from_vec(vec![0.5])];
        let v = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(matches!(RbfInterpolant::fit(&c, &v, None), Err(Error::Singular(_))));
        assert!(matches!(GpInterpolant::fit(&c, &v, None, 1e-8), Err(Error::Singular(_))));
    }

    #[test]
    fn gp_interpolates_and_differentiates() {
        let (centers, values) = cloud(10, 2, 5);
        let gp = GpInterpolant::fit(&centers, &values, None, 1e-8).unwrap();
        for (k, c) in centers.iter().enumerate() {
            let v = gp.eval(c).unwrap();
            assert!((v - values.row(k).transpose()).amax() <= 1e-6);
        }
        let x = DVector::from_vec(vec![0.45, 0.6]);
        for i in 0..2 {
            let g = gp.gradient(&x, i).unwrap();
            let n = fd(|y| gp.eval(y).unwrap(), &x, i);
            assert!((&g - &n).amax() <= 1e-5 * g.amax().max(1.0));
        }
    }

    #[test]
    fn default_hyperparameters() {
        let c: Vec<_> = [0.0, 1.0, 3.0].iter().map(|v| DVector::from_vec(vec![*v])).collect();
        // Pairwise distances 1, 2, 3: median 2.
        assert_eq!(default_rbf_shape(&c), 0.5);
        // Nearest neighbours: 1, 1, 2.
        assert!((mean_nearest_neighbor(&c) - 4.0 / 3.0).abs() < 1e-15);
    }
}

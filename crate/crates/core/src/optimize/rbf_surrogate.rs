use nalgebra::{DMatrix, DVector};

use crate::data::ParameterVector;
use crate::error::{Error, Result};
use crate::interp::RbfInterpolant;

/// Gaussian RBF interpolant of a scalar objective over parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarRbfSurrogate {
    interp: RbfInterpolant,
}

impl ScalarRbfSurrogate {
    pub fn eval(&self, mu: &ParameterVector) -> Result<f64> {
        Ok(self.interp.eval(mu.as_vector())?[0])
    }

    pub fn gradient(&self, mu: &ParameterVector) -> Result<DVector<f64>> {
        let n = self.interp.input_dim();
        Ok(DVector::from_iterator(
            n,
            (0..n)
                .map(|i| self.interp.gradient(mu.as_vector(), i).map(|g| g[0]))
                .collect::<Result<Vec<_>>>()?,
        ))
    }

    pub fn shape(&self) -> f64 {
        self.interp.shape()
    }
}

/// Interpolates `f(μ^{(k)})` at the training parameters.
pub fn rbf_objective_surrogate(
    training_mus: &[ParameterVector],
    training_fs: &[f64],
    shape: Option<f64>,
) -> Result<ScalarRbfSurrogate> {
    if training_mus.len() != training_fs.len() {
        return Err(Error::dim("training objective values", training_mus.len(), training_fs.len()));
    }
    let centers: Vec<DVector<f64>> = training_mus.iter().map(|m| m.as_vector().clone()).collect();
    let values = DMatrix::from_column_slice(training_fs.len(), 1, training_fs);
    Ok(ScalarRbfSurrogate {
        interp: RbfInterpolant::fit(&centers, &values, shape)?,
    })
}

//! Shared fixture for the criterion benchmarks: the Burgers benchmark
//! problem with a surrogate trained on its clean 16-point design.

use wlasdi::experiment::{prepare, train_surrogate, ExperimentConfig, PreparedData};
use wlasdi::{DynamicsForm, LatentModel, ParameterVector, Result, TargetMismatch};

pub struct Fixture {
    pub cfg: ExperimentConfig,
    pub data: PreparedData,
    pub model: LatentModel,
    /// Interior evaluation point (the optimizer start).
    pub mu: ParameterVector,
}

impl Fixture {
    pub fn burgers() -> Result<Self> {
        Self::new(ExperimentConfig::default())
    }

    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let data = prepare(&cfg, None)?;
        let trained = train_surrogate(
            &cfg.surrogate,
            DynamicsForm::Weak,
            cfg.surrogate.criterion,
            &cfg.burgers,
            &data.params,
            &data.clean,
        )?;
        let mu = cfg.x0()?;
        Ok(Self {
            cfg,
            data,
            model: trained.model,
            mu,
        })
    }

    pub fn objective(&self) -> TargetMismatch {
        self.data.objective()
    }
}

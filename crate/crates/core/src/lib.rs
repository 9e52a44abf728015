//! Weak-form latent-dynamics surrogates for PDE-constrained optimization.
//!
//! The pipeline: sample full-order trajectories ([`fom`]), compress them with
//! POD ([`pod`]), identify a latent ODE by weak-form regression
//! ([`dynamics`]), parameterize its coefficients over the design space
//! ([`coeff`]), integrate and decode it ([`rom`]), and differentiate
//! objectives through it ([`sensitivity`]) for use by the optimizers in
//! [`optimize`]. [`experiment`] wires the stages into the Burgers benchmark.

pub mod coeff;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod fom;
pub mod interp;
pub mod io;
pub mod linalg;
pub mod optimize;
pub mod pod;
pub mod rom;
pub mod sensitivity;

pub use coeff::{CoefficientProvider, ProviderKind, TrainingCoefficients};
pub use data::{
    inject_noise, relative_param_error, InitialCondition, NoiseScale, NoiseSpec, ParameterDomain,
    ParameterVector, SnapshotMatrix, TimeGrid,
};
pub use dynamics::{DynamicsForm, FeatureLibrary, IdentifiedDynamics, TestFunctionBasis, TestFunctionParams};
pub use error::{Error, Result};
pub use fom::{BurgersConfig, Upwind};
pub use optimize::{OptProblem, OptResult};
pub use pod::{LinearReducer, ReducerCriterion};
pub use rom::{ButcherTableau, Integrator, LatentModel};
pub use sensitivity::{GradientMethod, GradientResult, Objective, SolveCounts, TargetMismatch};

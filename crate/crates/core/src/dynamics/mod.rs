//! Latent dynamics identification: polynomial feature libraries, weak-form
//! regression against compactly supported test functions, and the
//! strong-form finite-difference baseline.

mod fit;
mod library;
mod test_functions;

pub use fit::{
    sindy_fit, sindy_fit_stacked, time_derivative, weak_system, wendy_fit, wendy_fit_stacked,
    DynamicsForm, IdentifiedDynamics, Identifier,
};
pub use library::FeatureLibrary;
pub use test_functions::{build_test_functions, TestFunctionBasis, TestFunctionParams};

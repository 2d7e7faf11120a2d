//! Optimal stopping value processes computed three ways: a reflected BSDE
//! (and its penalized approximations), a BSDE with a sign-constrained jump
//! integrand on a space enlarged by an independent exponential time, and a
//! dual problem over controlled jump intensities.
//!
//! All routes share one simulated scene (Brownian increments, jump times,
//! forward states), so their estimates can be compared without independent
//! sampling noise. The [`verify`] module runs the cross-checks.

pub mod config;
pub mod error;
pub mod intensity;
pub mod kernel;
pub mod problem;
pub mod randomized;
pub mod reflected;
pub mod regression;
pub mod stats;
pub mod verify;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use intensity::{
    dual_value_sweep, epsilon_optimal_intensity, epsilon_optimal_policy, evaluate_policy,
    girsanov_density, ConstantIntensity, EpsilonOptimalPolicy, IntensityPolicy, WeightedEstimate,
};
pub use kernel::{JumpRandomization, PathBundle, TimeGrid};
pub use problem::{
    binomial_snell_oracle, catalog, simulate_forward, stopping_payoff, ProblemParams, ProblemSpec,
    StatePaths, StoppingRule,
};
pub use randomized::{
    check_sign_constraint, lift_solution, residual_check, solve_penalized_randomized,
    RandomizedSolution,
};
pub use reflected::{
    penalization_diagnostics, solve_penalized, solve_snell, ReflectedSolution, Scheme,
};
pub use regression::RegressionBasis;
pub use stats::Estimate;

/// Version stamped into every JSON and report file.
pub const SCHEMA_VERSION: u32 = 1;

//! Adaptive PI passivity-based control of a fuel-cell boost converter.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod equilibrium;
pub mod error;
pub mod estimation;
pub mod model;
pub mod presets;
pub mod sim;
pub mod verify;

pub use control::{AdaptiveController, ControlOutput, ControllerGains, ControllerState, FullInfoController, PiPbc, Saturation};
pub use equilibrium::{solve_equilibrium, solve_equilibrium_with, EquilibriumPoint, SetpointSpec, SolverOptions, Theta};
pub use error::{Error, Result};
pub use estimation::{Estimator, EstimatorConfig, EstimatorGains, EstimatorState, ParameterEstimate};
pub use model::{ControlInput, FcCurve, PlantParams, PlantState};
pub use sim::{run_batch, run_simulation, ControllerMode, Integrator, ScenarioSpec, SimConfig, SimTrace};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

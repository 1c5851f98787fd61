//! Learning Lagrangians of mechanical systems with nonholonomic constraints
//! from trajectory data.
//!
//! The crate provides the full pipeline: analytic benchmark systems with
//! closed-form dynamics, an adaptive Runge-Kutta integrator with dense output,
//! dataset generation, a softplus MLP Lagrangian, acceleration formulas with
//! and without constraint forces, a trainer minimizing acceleration MSE, and
//! rollout evaluation of energy behavior and constraint adherence.

pub mod data;
pub mod diff;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod net;
pub mod ode;
pub mod report;
pub mod rng;
pub mod systems;
pub mod train;

pub use data::Dataset;
pub use diff::{Dual, ParamField, Scalar, ScalarField};
pub use dynamics::{ConstraintSet, DynamicsContext, LagrangianField, NoConstraints};
pub use error::{Error, Result};
pub use linalg::Mat;
pub use net::Params;
pub use ode::{integrate, Trajectory};
pub use report::{energy, report, rollout, EvalReport};
pub use rng::SplitMix64;
pub use systems::{State, SystemSpec};
pub use train::{loss_batch, train, Mode, TrainConfig, TrainHistory};

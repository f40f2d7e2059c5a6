//! Stochastic model-predictive dispatch engine for virtual power plants.
//!
//! The engine solves a scenario-based dispatch problem over a receding
//! horizon, shrinks it through dual-information-driven time series
//! aggregation, decomposes the aggregated model across assets and scenarios
//! with consensus ADMM, and certifies solution quality with lower/upper
//! objective bounds at every control step.
//!
//! All numeric kernels are generic over the scalar type; the `f64` aliases
//! below are what the CLI and most downstream code use.

pub mod bounds;
pub mod consensus;
pub mod fullscale;
pub mod mpc;
pub mod portfolio;
pub mod qp;
pub mod scenario;
pub mod tsa;
pub mod scalar;
pub mod seed;

pub use qp::{QpSettings, QpStatus};
pub use scalar::Scalar;

/// Concrete `f64` aliases for the main problem types.
pub type QpProblem64 = qp::QpProblem<f64>;
pub type QpSolution64 = qp::QpSolution<f64>;
pub type QpSettings64 = qp::QpSettings<f64>;
pub type Portfolio64 = portfolio::Portfolio<f64>;
pub type BaseSeries64 = scenario::BaseSeries<f64>;
pub type ScenarioSet64 = scenario::ScenarioSet<f64>;
pub type FullScaleInstance64 = fullscale::FullScaleInstance<f64>;
pub type AggregatedInstance64 = tsa::AggregatedInstance<f64>;
pub type Clustering64 = tsa::Clustering<f64>;
pub type AdmmSettings64 = consensus::AdmmSettings<f64>;
pub type RefinementParams64 = bounds::RefinementParams<f64>;
pub type BoundsReport64 = bounds::BoundsReport<f64>;
pub type MpcParams64 = mpc::MpcParams<f64>;
pub type MpcTrace64 = mpc::MpcTrace<f64>;

//! Federated Bayesian posterior sampling via Langevin dynamics.
//!
//! The crate simulates a client/server federation where each client runs
//! local Langevin steps on its own potential and a central server
//! intermittently averages the client parameters (FALD), optionally with
//! SVRG-style control variates that remove the client-drift bias
//! (VR-FALD*). Alongside the samplers it ships the exact Gaussian analytics
//! needed to verify them end to end: product posteriors, 2-Wasserstein
//! distances, the stationary law of the two-client kernel, a heterogeneity
//! lower bound and a communication-budget optimizer.
//!
//! All numerics are generic over the [`Scalar`] type (`f32` or `f64`); the
//! aliases at the crate root pin `f64`, which is what the CLI and the test
//! suites use.

pub mod analytics;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod potentials;
pub mod samplers;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense `f64` vector used throughout the default instantiation.
pub type Vector = nalgebra::DVector<f64>;
/// Dense `f64` matrix used throughout the default instantiation.
pub type Matrix = nalgebra::DMatrix<f64>;

pub type GaussianPotential = potentials::GaussianPotential<f64>;
pub type QuadraticTerm = potentials::QuadraticTerm<f64>;
pub type QuadraticSumPotential = potentials::QuadraticSumPotential<f64>;
pub type LogisticPotential = potentials::LogisticPotential<f64>;
pub type ClientPotential = potentials::ClientPotential<f64>;
pub type PotentialSet = potentials::PotentialSet<f64>;
pub type ConstantsReport = potentials::ConstantsReport<f64>;

pub type ControlVariateState = samplers::ControlVariateState<f64>;

pub type SamplerConfig = federation::SamplerConfig<f64>;
pub type FederationState = federation::FederationState<f64>;
pub type SampleTrace = federation::SampleTrace<f64>;

pub type GaussianLaw = analytics::GaussianLaw<f64>;
pub type TwoClientGaussianSpec = analytics::TwoClientGaussianSpec<f64>;
pub type BudgetProblem = analytics::BudgetProblem<f64>;
pub type BudgetSolution = analytics::BudgetSolution<f64>;

pub type MomentSummary = metrics::MomentSummary<f64>;
pub type HpdEstimate = metrics::HpdEstimate<f64>;

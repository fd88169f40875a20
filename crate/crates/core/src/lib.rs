//! Federated optimization simulator for studying how shuffling a fraction of
//! client data (real or synthetic) changes heterogeneity parameters and the
//! round complexity of local-SGD methods.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file pin the common `f64` instantiations.

pub mod data;
pub mod error;
pub mod fed;
pub mod hetero;
pub mod linalg;
pub mod objective;
pub mod rng;
pub mod synth;
pub mod theory;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type LabeledExampleF64 = data::LabeledExample<f64>;
pub type QuadraticProblemF64 = objective::QuadraticProblem<f64>;
pub type SoftmaxRegressionF64 = objective::SoftmaxRegression<f64>;
pub type EvalPointSetF64 = hetero::EvalPointSet<f64>;
pub type HeterogeneityReportF64 = hetero::HeterogeneityReport<f64>;
pub type ConvergenceParamsF64 = theory::ConvergenceParams<f64>;
pub type RunOutcomeF64 = fed::RunOutcome<f64>;

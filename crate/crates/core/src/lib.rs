//! Power-aware LLM serving: an analytic power/performance model of
//! multi-GPU decode, a profiler and tree-ensemble predictor trained on it, a
//! closed-loop power-cap/batch-size controller, a multi-node cluster
//! simulator and frontier/QoS analytics.
//!
//! The analytic model in [`perf`] is generic over [`Scalar`]; the aliases
//! below fix it to `f64`, which is what the rest of the crate runs on.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod controller;
pub mod error;
pub mod perf;
pub mod predictor;
pub mod profiler;
pub mod scalar;
pub mod sim;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

pub type GpuSpec = perf::GpuSpec<f64>;
pub type ModelProfile = perf::ModelProfile<f64>;
pub type OperatingPoint = perf::OperatingPoint<f64>;
pub type StepTiming = perf::StepTiming<f64>;
pub type SystemPowerCoeffs = perf::SystemPowerCoeffs<f64>;
pub type Evaluation = perf::Evaluation<f64>;
pub type PerfModel = perf::PerfModel<f64>;

pub type GpuSpecF32 = perf::GpuSpec<f32>;
pub type ModelProfileF32 = perf::ModelProfile<f32>;
pub type OperatingPointF32 = perf::OperatingPoint<f32>;
pub type PerfModelF32 = perf::PerfModel<f32>;

pub use perf::{Deployment, ProfileRegistry};

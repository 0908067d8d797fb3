//! Analytic power/performance model of multi-GPU decode.
//!
//! A step of batched decoding is split into a compute phase, whose duration
//! scales with the inverse of the effective SM frequency, and a communication
//! phase that does not respond to the power cap. The two phases partially
//! overlap. GPU power is the time-weighted mix of the compute-phase draw
//! (bounded by the cap) and the communication-phase draw.
//!
//! Everything here is generic over [`Scalar`] so the same curves can be
//! evaluated in `f32` or `f64`; the crate root exposes `f64` aliases.

mod calibrate;
mod registry;

pub use calibrate::{calibrate, Anchor, AnchorMetric, CalibrationOptions, Coefficient};
pub use registry::{ProfileRegistry, BUILTIN_PROFILE_IDS};

use std::collections::BTreeMap;

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// GPUs installed in every node.
pub const GPUS_PER_NODE: u32 = 4;

/// Fraction of `f_max` a GPU keeps at the lowest power caps.
pub const FREQUENCY_FLOOR: f64 = 0.4;

/// Platform power-management envelope of one GPU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec<T> {
    pub p_idle: T,
    pub p_max_cap: T,
    pub p_min_cap: T,
    /// Normalized frequency at an uncapped GPU.
    pub f_max: T,
}

impl<T: Scalar> GpuSpec<T> {
    /// A100-class envelope: 100-400 W settable cap range.
    pub fn a100() -> Self {
        GpuSpec {
            p_idle: T::lit(55.0),
            p_max_cap: T::lit(400.0),
            p_min_cap: T::lit(100.0),
            f_max: T::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_min_cap < self.p_max_cap) {
            return Err(Error::Config(format!(
                "p_min_cap {} must be below p_max_cap {}",
                self.p_min_cap, self.p_max_cap
            )));
        }
        if self.p_idle < T::zero() || !(self.f_max > T::zero()) {
            return Err(Error::Config("p_idle must be >= 0 and f_max > 0".into()));
        }
        Ok(())
    }

    pub fn check_cap(&self, cap: T) -> Result<()> {
        // Allow for round-off on caps computed from budgets.
        let slack = T::lit(1e-9);
        if cap.is_nan() || cap < self.p_min_cap - slack || cap > self.p_max_cap + slack {
            return Err(Error::CapOutOfRange {
                cap: cap.to_f64_lossy(),
                min: self.p_min_cap.to_f64_lossy(),
                max: self.p_max_cap.to_f64_lossy(),
            });
        }
        Ok(())
    }
}

/// Linear map from summed GPU power to wall (system) power of one node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemPowerCoeffs<T> {
    pub alpha: T,
    pub beta: T,
}

impl<T: Scalar> Default for SystemPowerCoeffs<T> {
    fn default() -> Self {
        SystemPowerCoeffs {
            alpha: T::lit(1.05),
            beta: T::lit(345.0),
        }
    }
}

/// Static parallelism knobs a model is deployed with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Deployment {
    pub tp: u32,
    pub ep: u32,
    pub dp: u32,
}

/// Calibration record for one served model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile<T> {
    pub name: String,
    /// Billions of parameters.
    pub total_params: T,
    pub active_params: T,
    /// Zero for dense models.
    pub n_experts: u32,
    pub top_k: u32,
    pub deployment: Deployment,
    /// Fixed compute time per decode step.
    pub k0: T,
    /// Compute time per batched sequence (divided by TP).
    pub k1: T,
    /// Fixed communication time per step, keyed by TP degree.
    pub m0_tp: BTreeMap<u32, T>,
    /// Communication time per batched sequence.
    pub m1: T,
    /// Multiplicative communication inflation per node beyond the first.
    pub node_penalty: T,
    /// Cap above which the SM clock no longer rises.
    pub p_knee: T,
    pub p_comp_demand0: T,
    pub p_comp_demand1: T,
    pub p_comm: T,
    /// Fraction of the shorter phase hidden under the longer one.
    pub overlap: T,
}

impl<T: Scalar> ModelProfile<T> {
    pub fn is_moe(&self) -> bool {
        self.n_experts > 0
    }

    pub fn validate(&self, spec: &GpuSpec<T>) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("profile {}: {what}", self.name)));
        let zero = T::zero();
        if self.k0 < zero || self.k1 < zero || self.m1 < zero {
            return bad("k0, k1 and m1 must be non-negative");
        }
        if self.m0_tp.values().any(|v| *v < zero) {
            return bad("m0_tp entries must be non-negative");
        }
        if self.m0_tp.is_empty() {
            return bad("m0_tp must cover at least one TP degree");
        }
        if self.p_knee < spec.p_min_cap || self.p_knee > spec.p_max_cap {
            return bad("p_knee must lie within the platform cap range");
        }
        if self.p_comm < spec.p_idle {
            return bad("p_comm must be at least p_idle");
        }
        if self.node_penalty < T::one() {
            return bad("node_penalty must be >= 1");
        }
        if self.overlap < zero || self.overlap > T::one() {
            return bad("overlap must lie in [0, 1]");
        }
        if self.n_experts > 0 && self.top_k == 0 {
            return bad("MoE profiles need top_k >= 1");
        }
        Ok(())
    }

    /// Checks that the static knobs of `point` can be realized by this model.
    pub fn check_point(&self, point: &OperatingPoint<T>) -> Result<()> {
        if point.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if point.dp == 0 || point.ep == 0 || point.tp == 0 {
            return Err(Error::Config("parallel degrees must be >= 1".into()));
        }
        if !self.m0_tp.contains_key(&point.tp) {
            return Err(Error::UnsupportedTp {
                profile: self.name.clone(),
                tp: point.tp,
            });
        }
        if self.n_experts == 0 && point.ep > 1 {
            return Err(Error::Config(format!(
                "dense model {} cannot use expert parallelism {}",
                self.name, point.ep
            )));
        }
        if self.n_experts > 0 && point.ep > self.n_experts {
            return Err(Error::Config(format!(
                "EP {} exceeds the {} experts of {}",
                point.ep, self.n_experts, self.name
            )));
        }
        Ok(())
    }
}

/// One configuration of the five knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint<T> {
    pub power_cap: T,
    pub batch_size: u32,
    pub tp: u32,
    pub ep: u32,
    pub dp: u32,
}

impl<T: Scalar> OperatingPoint<T> {
    pub fn new(power_cap: T, batch_size: u32, tp: u32, ep: u32, dp: u32) -> Self {
        OperatingPoint {
            power_cap,
            batch_size,
            tp,
            ep,
            dp,
        }
    }

    pub fn deployed(power_cap: T, batch_size: u32, deployment: Deployment) -> Self {
        Self::new(power_cap, batch_size, deployment.tp, deployment.ep, deployment.dp)
    }

    pub fn with_cap(self, power_cap: T) -> Self {
        OperatingPoint { power_cap, ..self }
    }

    pub fn with_batch(self, batch_size: u32) -> Self {
        OperatingPoint { batch_size, ..self }
    }

    pub fn deployment(&self) -> Deployment {
        Deployment {
            tp: self.tp,
            ep: self.ep,
            dp: self.dp,
        }
    }

    /// GPUs drawing power: every GPU of every node in the deployment.
    pub fn gpu_count(&self) -> u32 {
        GPUS_PER_NODE * self.dp
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTiming<T> {
    pub t_comp: T,
    pub t_comm: T,
    pub t_step: T,
}

/// Normalized SM frequency reached under `cap`.
pub fn effective_frequency<T: Scalar>(cap: T, spec: &GpuSpec<T>, profile: &ModelProfile<T>) -> Result<T> {
    spec.check_cap(cap)?;
    let span = profile.p_knee - spec.p_min_cap;
    if span <= T::zero() {
        return Ok(spec.f_max);
    }
    let ratio = ((cap - spec.p_min_cap) / span)
        .max(T::lit(FREQUENCY_FLOOR))
        .min(T::one());
    Ok(spec.f_max * ratio)
}

pub fn step_timing<T: Scalar>(
    point: &OperatingPoint<T>,
    profile: &ModelProfile<T>,
    spec: &GpuSpec<T>,
) -> Result<StepTiming<T>> {
    profile.check_point(point)?;
    let f = effective_frequency(point.power_cap, spec, profile)?;
    let batch = T::lit(point.batch_size as f64);
    let tp = T::lit(point.tp as f64);
    let t_comp = (profile.k0 + profile.k1 * batch / tp) / f;
    let m0 = profile.m0_tp[&point.tp];
    let nodes_beyond_first = point.dp.saturating_sub(1) as i32;
    let t_comm = (m0 + profile.m1 * batch) * profile.node_penalty.powi(nodes_beyond_first);
    let t_step = t_comp.max(t_comm) + (T::one() - profile.overlap) * t_comp.min(t_comm);
    Ok(StepTiming { t_comp, t_comm, t_step })
}

/// Tokens per second of the whole deployment: every node advances its own
/// batch by one token per step.
pub fn throughput<T: Scalar>(point: &OperatingPoint<T>, profile: &ModelProfile<T>, spec: &GpuSpec<T>) -> Result<T> {
    let timing = step_timing(point, profile, spec)?;
    Ok(T::lit((point.batch_size * point.dp) as f64) / timing.t_step)
}

/// Average per-GPU draw over one step.
pub fn avg_gpu_power<T: Scalar>(point: &OperatingPoint<T>, profile: &ModelProfile<T>, spec: &GpuSpec<T>) -> Result<T> {
    let timing = step_timing(point, profile, spec)?;
    Ok(phase_power(point, profile, &timing))
}

fn phase_power<T: Scalar>(point: &OperatingPoint<T>, profile: &ModelProfile<T>, timing: &StepTiming<T>) -> T {
    let batch = T::lit(point.batch_size as f64);
    let tp = T::lit(point.tp as f64);
    let demand = profile.p_comp_demand0 + profile.p_comp_demand1 * batch / tp;
    let p_comp = point.power_cap.min(demand);
    let p_comm = point.power_cap.min(profile.p_comm);
    let exposed = timing.t_step - timing.t_comp;
    (timing.t_comp * p_comp + exposed * p_comm) / timing.t_step
}

/// Wall power of one node: `alpha * sum(gpu) + beta`.
///
/// Only needs ring arithmetic, so it can be evaluated exactly (e.g. over
/// rationals).
pub fn system_power<T: Num + Copy>(gpu_powers: &[T], coeffs: &SystemPowerCoeffs<T>) -> T {
    let sum = gpu_powers.iter().fold(T::zero(), |acc, p| acc + *p);
    coeffs.alpha * sum + coeffs.beta
}

/// Wall power of a deployment whose GPUs all draw `gpu_power`.
pub fn deployment_system_power<T: Scalar>(gpu_power: T, dp: u32, coeffs: &SystemPowerCoeffs<T>) -> T {
    let node = system_power(&[gpu_power; GPUS_PER_NODE as usize], coeffs);
    node * T::lit(dp as f64)
}

/// Tokens per joule of system energy.
pub fn efficiency<T: Scalar>(
    point: &OperatingPoint<T>,
    profile: &ModelProfile<T>,
    spec: &GpuSpec<T>,
    coeffs: &SystemPowerCoeffs<T>,
) -> Result<T> {
    Ok(evaluate(point, profile, spec, coeffs)?.efficiency)
}

/// All model outputs for one operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation<T> {
    pub timing: StepTiming<T>,
    pub throughput: T,
    pub gpu_power: T,
    pub system_power: T,
    pub efficiency: T,
}

pub fn evaluate<T: Scalar>(
    point: &OperatingPoint<T>,
    profile: &ModelProfile<T>,
    spec: &GpuSpec<T>,
    coeffs: &SystemPowerCoeffs<T>,
) -> Result<Evaluation<T>> {
    let timing = step_timing(point, profile, spec)?;
    let throughput = T::lit((point.batch_size * point.dp) as f64) / timing.t_step;
    let gpu_power = phase_power(point, profile, &timing);
    let system_power = deployment_system_power(gpu_power, point.dp, coeffs);
    Ok(Evaluation {
        timing,
        throughput,
        gpu_power,
        system_power,
        efficiency: throughput / system_power,
    })
}

/// A profile bound to its platform, for repeated evaluation.
#[derive(Clone, Debug)]
pub struct PerfModel<T> {
    pub profile: ModelProfile<T>,
    pub spec: GpuSpec<T>,
    pub coeffs: SystemPowerCoeffs<T>,
}

impl<T: Scalar> PerfModel<T> {
    pub fn new(profile: ModelProfile<T>, spec: GpuSpec<T>, coeffs: SystemPowerCoeffs<T>) -> Result<Self> {
        spec.validate()?;
        profile.validate(&spec)?;
        Ok(PerfModel { profile, spec, coeffs })
    }

    pub fn evaluate(&self, point: &OperatingPoint<T>) -> Result<Evaluation<T>> {
        evaluate(point, &self.profile, &self.spec, &self.coeffs)
    }

    pub fn throughput(&self, point: &OperatingPoint<T>) -> Result<T> {
        throughput(point, &self.profile, &self.spec)
    }

    pub fn efficiency(&self, point: &OperatingPoint<T>) -> Result<T> {
        efficiency(point, &self.profile, &self.spec, &self.coeffs)
    }

    /// Point at the deployment's static knobs.
    pub fn point(&self, power_cap: T, batch_size: u32) -> OperatingPoint<T> {
        OperatingPoint::deployed(power_cap, batch_size, self.profile.deployment)
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, GpuSpec, ModelProfile, OperatingPoint, SystemPowerCoeffs};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A free coefficient of [`ModelProfile`] the calibrator may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coefficient {
    K0,
    K1,
    M0(u32),
    M1,
    PKnee,
    NodePenalty,
    PComm,
    PCompDemand0,
    PCompDemand1,
}

impl Coefficient {
    /// Every coefficient of `profile`, one `M0` per TP entry.
    pub fn all_for<T>(profile: &ModelProfile<T>) -> Vec<Coefficient> {
        let mut out = vec![Coefficient::K0, Coefficient::K1];
        out.extend(profile.m0_tp.keys().map(|tp| Coefficient::M0(*tp)));
        out.extend([
            Coefficient::M1,
            Coefficient::PKnee,
            Coefficient::NodePenalty,
            Coefficient::PComm,
            Coefficient::PCompDemand0,
            Coefficient::PCompDemand1,
        ]);
        out
    }

    fn get<T: Scalar>(&self, p: &ModelProfile<T>) -> T {
        match self {
            Coefficient::K0 => p.k0,
            Coefficient::K1 => p.k1,
            Coefficient::M0(tp) => p.m0_tp.get(tp).copied().unwrap_or_else(T::zero),
            Coefficient::M1 => p.m1,
            Coefficient::PKnee => p.p_knee,
            Coefficient::NodePenalty => p.node_penalty,
            Coefficient::PComm => p.p_comm,
            Coefficient::PCompDemand0 => p.p_comp_demand0,
            Coefficient::PCompDemand1 => p.p_comp_demand1,
        }
    }

    fn set<T: Scalar>(&self, p: &mut ModelProfile<T>, spec: &GpuSpec<T>, v: T) {
        let v = v.max(T::zero());
        match self {
            Coefficient::K0 => p.k0 = v,
            Coefficient::K1 => p.k1 = v,
            Coefficient::M0(tp) => {
                p.m0_tp.insert(*tp, v);
            }
            Coefficient::M1 => p.m1 = v,
            Coefficient::PKnee => {
                p.p_knee = v.max(spec.p_min_cap + T::lit(1.0)).min(spec.p_max_cap)
            }
            Coefficient::NodePenalty => p.node_penalty = v.max(T::one()),
            Coefficient::PComm => p.p_comm = v.max(spec.p_idle),
            Coefficient::PCompDemand0 => p.p_comp_demand0 = v,
            Coefficient::PCompDemand1 => p.p_comp_demand1 = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AnchorMetric<T> {
    Throughput,
    GpuPower,
    SystemPower,
    Efficiency,
    /// Efficiency at the anchor point divided by efficiency at `reference`.
    EfficiencyRatio { reference: OperatingPoint<T> },
    /// Throughput at the anchor point divided by throughput at `reference`.
    ThroughputRatio { reference: OperatingPoint<T> },
}

/// A target value the calibrated model must reproduce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor<T> {
    pub point: OperatingPoint<T>,
    pub metric: AnchorMetric<T>,
    pub target: T,
}

impl<T: Scalar> Anchor<T> {
    pub fn new(point: OperatingPoint<T>, metric: AnchorMetric<T>, target: T) -> Self {
        Anchor { point, metric, target }
    }

    /// Current model value of this anchor's metric.
    pub fn model_value(
        &self,
        profile: &ModelProfile<T>,
        spec: &GpuSpec<T>,
        coeffs: &SystemPowerCoeffs<T>,
    ) -> Result<T> {
        let e = evaluate(&self.point, profile, spec, coeffs)?;
        Ok(match &self.metric {
            AnchorMetric::Throughput => e.throughput,
            AnchorMetric::GpuPower => e.gpu_power,
            AnchorMetric::SystemPower => e.system_power,
            AnchorMetric::Efficiency => e.efficiency,
            AnchorMetric::EfficiencyRatio { reference } => {
                e.efficiency / evaluate(reference, profile, spec, coeffs)?.efficiency
            }
            AnchorMetric::ThroughputRatio { reference } => {
                e.throughput / evaluate(reference, profile, spec, coeffs)?.throughput
            }
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Coefficients to fit; `None` frees every coefficient of the template.
    pub free: Option<Vec<Coefficient>>,
    /// Maximum accepted relative error per anchor.
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            free: None,
            tolerance: 0.05,
            max_sweeps: 400,
            seed: 0,
        }
    }
}

fn residuals<T: Scalar>(
    profile: &ModelProfile<T>,
    anchors: &[Anchor<T>],
    spec: &GpuSpec<T>,
    coeffs: &SystemPowerCoeffs<T>,
) -> Vec<f64> {
    anchors
        .iter()
        .map(|a| match a.model_value(profile, spec, coeffs) {
            Ok(v) => (v / a.target - T::one()).to_f64_lossy(),
            Err(_) => f64::INFINITY,
        })
        .collect()
}

fn loss(res: &[f64]) -> f64 {
    res.iter().map(|r| r * r).sum()
}

/// Fits the free coefficients of `template` so the model reproduces
/// `anchors`, by multiplicative coordinate descent on the summed squared
/// relative error.
///
/// The visiting order of coefficients is shuffled per sweep from `seed`, so
/// results are reproducible. Fails when the worst anchor still misses by more
/// than `options.tolerance` once the step size has collapsed.
pub fn calibrate<T: Scalar>(
    template: &ModelProfile<T>,
    anchors: &[Anchor<T>],
    spec: &GpuSpec<T>,
    coeffs: &SystemPowerCoeffs<T>,
    options: &CalibrationOptions,
) -> Result<ModelProfile<T>> {
    let free = options
        .free
        .clone()
        .unwrap_or_else(|| Coefficient::all_for(template));
    if anchors.len() < free.len() {
        return Err(Error::Underdetermined {
            anchors: anchors.len(),
            params: free.len(),
        });
    }
    if anchors.iter().any(|a| !(a.target > T::zero())) {
        return Err(Error::Config("calibration anchors need positive targets".into()));
    }

    let mut best = template.clone();
    let mut res = residuals(&best, anchors, spec, coeffs);
    let mut best_loss = loss(&res);
    if best_loss <= 1e-24 {
        return Ok(best);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order = free.clone();
    let mut step = 0.25_f64;
    for _ in 0..options.max_sweeps {
        order.shuffle(&mut rng);
        let mut improved = false;
        for coef in &order {
            for dir in [1.0_f64, -1.0] {
                // Keep stepping in a direction while it pays off.
                loop {
                    let v = coef.get(&best);
                    let next = if v > T::zero() {
                        v * T::lit(1.0 + dir * step)
                    } else if dir > 0.0 {
                        T::lit(step * 1e-3)
                    } else {
                        break;
                    };
                    let mut trial = best.clone();
                    coef.set(&mut trial, spec, next);
                    if coef.get(&trial) == v {
                        break;
                    }
                    let trial_res = residuals(&trial, anchors, spec, coeffs);
                    let trial_loss = loss(&trial_res);
                    if trial_loss < best_loss {
                        best = trial;
                        best_loss = trial_loss;
                        res = trial_res;
                        improved = true;
                    } else {
                        break;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-7 {
                break;
            }
        }
    }

    let worst = res.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    if worst <= options.tolerance {
        Ok(best)
    } else {
        Err(Error::Calibration {
            worst,
            tolerance: options.tolerance,
            residuals: res,
        })
    }
}

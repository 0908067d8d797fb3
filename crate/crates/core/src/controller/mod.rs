//! Runtime control of the power cap and batch-size cap.
//!
//! Each interval the node controller scores every candidate configuration
//! with a [`PointPredictor`], corrects the predicted throughput and power by
//! multiplicative biases learned from telemetry, and picks the most
//! efficient configuration that meets the throughput target (and node power
//! budget, when one is set). A new configuration is only applied after the
//! target deviation has persisted for several intervals, or right away when
//! the targets themselves change.

mod allocate;
mod dr;

pub use allocate::{allocate_budget, AllocationRequest, DEFAULT_QUANTUM};
pub use dr::{dr_track, BudgetTrace, DrRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{PointPredictor, PredictedMetrics};
use crate::{OperatingPoint, SystemPowerCoeffs};

/// Relative slack for float comparisons in selection, so that scaling all
/// inputs by a common constant cannot flip a tie.
const REL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Anti-windup clamp on the integral term.
    pub integral_limit: f64,
    /// Deviation threshold on normalized error.
    pub epsilon: f64,
    /// Consecutive deviating intervals before a new point is applied.
    pub n_sustain: u32,
    /// Control interval, seconds.
    pub interval: f64,
    pub bias_min: f64,
    pub bias_max: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            kp: 0.5,
            ki: 0.1,
            kd: 0.05,
            integral_limit: 0.5,
            epsilon: 0.05,
            n_sustain: 3,
            interval: 0.5,
            bias_min: 0.5,
            bias_max: 2.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config("epsilon must lie in (0, 1)".into()));
        }
        if !(self.interval > 0.0) {
            return Err(Error::Config("control interval must be positive".into()));
        }
        if !(self.bias_min > 0.0 && self.bias_min <= 1.0 && self.bias_max >= 1.0) {
            return Err(Error::Config("bias clamp must bracket 1.0 and stay positive".into()));
        }
        if self.integral_limit < 0.0 {
            return Err(Error::Config("integral_limit must be non-negative".into()));
        }
        Ok(())
    }
}

/// What a node is asked to achieve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    /// Tokens/s. `f64::INFINITY` asks for maximum throughput, which together
    /// with a budget gives the demand-response mode.
    pub throughput_target: f64,
    /// Wall-power budget of the node's deployment, watts.
    pub power_budget: Option<f64>,
    pub epsilon: f64,
}

impl Targets {
    pub fn new(throughput_target: f64, power_budget: Option<f64>, epsilon: f64) -> Result<Self> {
        let t = Targets {
            throughput_target,
            power_budget,
            epsilon,
        };
        t.validate()?;
        Ok(t)
    }

    /// Maximize throughput under `budget`.
    pub fn budget_only(budget: f64, epsilon: f64) -> Result<Self> {
        Self::new(f64::INFINITY, Some(budget), epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.throughput_target > 0.0) {
            return Err(Error::Config("throughput target must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config("epsilon must lie in (0, 1)".into()));
        }
        if let Some(b) = self.power_budget {
            if !(b > 0.0) {
                return Err(Error::Config("power budget must be positive".into()));
            }
        }
        Ok(())
    }

    /// Normalized throughput error `(target - measured) / target`; zero in
    /// max-throughput mode.
    pub fn normalized_error(&self, measured: f64) -> f64 {
        if self.throughput_target.is_finite() {
            (self.throughput_target - measured) / self.throughput_target
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    QosFeasibleMaxEfficiency,
    FallbackMaxThroughput,
    BudgetConstrainedMaxThroughput,
    HoldHysteresis,
    /// Chosen by exhaustive search on the analytic model.
    Exhaustive,
}

impl Reason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Reason::QosFeasibleMaxEfficiency => "qos-feasible-max-efficiency",
            Reason::FallbackMaxThroughput => "fallback-max-throughput",
            Reason::BudgetConstrainedMaxThroughput => "budget-constrained-max-throughput",
            Reason::HoldHysteresis => "hold-hysteresis",
            Reason::Exhaustive => "exhaustive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub point: OperatingPoint,
    /// Whether `point` differs from the configuration in force and is being
    /// applied now. `false` always means `point` is the current one.
    pub applied: bool,
    pub reason: Reason,
    /// Normalized throughput error of the interval that triggered this decision.
    pub error: f64,
    pub bias: f64,
    /// Bias-corrected prediction for `point`, when one was made.
    pub predicted: Option<PredictedMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
}

impl PidState {
    fn zero() -> Self {
        PidState {
            integral: 0.0,
            prev_error: 0.0,
        }
    }

    /// Advances on relative error `r` and returns the multiplicative update
    /// factor.
    fn step(&mut self, r: f64, cfg: &ControllerConfig) -> f64 {
        self.integral = (self.integral + r).clamp(-cfg.integral_limit, cfg.integral_limit);
        let derivative = r - self.prev_error;
        self.prev_error = r;
        1.0 + cfg.kp * r + cfg.ki * self.integral + cfg.kd * derivative
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub pid: PidState,
    /// Correction applied to predicted throughput.
    pub bias: f64,
    pub power_pid: PidState,
    /// Correction applied to predicted system power.
    pub power_bias: f64,
    pub sustain_counter: u32,
    pub current_point: OperatingPoint,
    pub last_t: Option<f64>,
    pub last_targets: Option<Targets>,
}

impl ControllerState {
    pub fn new(initial: OperatingPoint) -> Self {
        ControllerState {
            pid: PidState::zero(),
            bias: 1.0,
            power_pid: PidState::zero(),
            power_bias: 1.0,
            sustain_counter: 0,
            current_point: initial,
            last_t: None,
            last_targets: None,
        }
    }
}

/// Per-interval measurements of one deployment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub t: f64,
    /// Mean draw of every GPU in the deployment over the interval.
    pub per_gpu_power: Vec<f64>,
    /// Tokens/s over the interval.
    pub throughput: f64,
    pub utilization: f64,
    pub queue_depth: u64,
    /// Sequences in the running batch at the end of the interval.
    pub active_batch: u32,
    /// Cap in force during the interval.
    pub power_cap: f64,
    /// Batch-size cap in force during the interval.
    pub batch_cap: u32,
}

impl TelemetrySample {
    /// Wall power of the deployment: `alpha * sum + beta` per node.
    pub fn system_power(&self, dp: u32, coeffs: &SystemPowerCoeffs) -> f64 {
        let sum: f64 = self.per_gpu_power.iter().sum();
        coeffs.alpha * sum + coeffs.beta * dp as f64
    }
}

/// Candidate together with its bias-corrected prediction.
#[derive(Clone, Copy, Debug)]
struct Scored {
    point: OperatingPoint,
    metrics: PredictedMetrics,
}

fn corrected(raw: PredictedMetrics, bias: f64, power_bias: f64) -> PredictedMetrics {
    let throughput_hat = raw.throughput_hat * bias;
    let system_power_hat = raw.system_power_hat * power_bias;
    PredictedMetrics {
        throughput_hat,
        power_hat: raw.power_hat * power_bias,
        system_power_hat,
        efficiency_hat: throughput_hat / system_power_hat,
    }
}

fn ge_tol(a: f64, b: f64) -> bool {
    a >= b - REL_TOL * b.abs()
}

fn gt_tol(a: f64, b: f64) -> bool {
    a > b + REL_TOL * b.abs()
}

/// Canonical order: lower cap first, then smaller batch; used as the
/// tie-break of every argmax below.
fn canonical_order(points: &mut [OperatingPoint]) {
    points.sort_by(|a, b| {
        a.power_cap
            .total_cmp(&b.power_cap)
            .then(a.batch_size.cmp(&b.batch_size))
            .then(a.tp.cmp(&b.tp))
            .then(a.ep.cmp(&b.ep))
            .then(a.dp.cmp(&b.dp))
    });
}

fn argmax_by(items: &[Scored], key: impl Fn(&Scored) -> f64) -> Option<Scored> {
    let mut best: Option<Scored> = None;
    for s in items {
        match &best {
            Some(b) if !gt_tol(key(s), key(b)) => {}
            _ => best = Some(*s),
        }
    }
    best
}

/// Picks a configuration from `candidates` (the core of one control step).
///
/// Predicted throughput is multiplied by `bias` and predicted power by
/// `power_bias` before any comparison.
pub fn select_with_bias(
    candidates: &[OperatingPoint],
    targets: &Targets,
    predictor: &dyn PointPredictor,
    bias: f64,
    power_bias: f64,
) -> Result<(OperatingPoint, Reason, PredictedMetrics)> {
    if candidates.is_empty() {
        return Err(Error::Config("candidate list is empty".into()));
    }
    let mut pts = candidates.to_vec();
    canonical_order(&mut pts);
    let scored: Vec<Scored> = pts
        .into_iter()
        .map(|point| {
            let raw = predictor.predict_point(&point)?;
            Ok(Scored {
                point,
                metrics: corrected(raw, bias, power_bias),
            })
        })
        .collect::<Result<_>>()?;

    let within_budget = |s: &Scored| match targets.power_budget {
        Some(b) => !gt_tol(s.metrics.system_power_hat, b),
        None => true,
    };
    let ok: Vec<Scored> = scored
        .iter()
        .copied()
        .filter(|s| within_budget(s) && ge_tol(s.metrics.throughput_hat, targets.throughput_target))
        .collect();
    let pick = |s: Scored, r: Reason| (s.point, r, s.metrics);
    if let Some(best) = argmax_by(&ok, |s| s.metrics.efficiency_hat) {
        return Ok(pick(best, Reason::QosFeasibleMaxEfficiency));
    }
    if targets.power_budget.is_some() {
        let fits: Vec<Scored> = scored.iter().copied().filter(within_budget).collect();
        if let Some(best) = argmax_by(&fits, |s| s.metrics.throughput_hat) {
            return Ok(pick(best, Reason::BudgetConstrainedMaxThroughput));
        }
        // Nothing fits: draw as little as possible.
        let best = argmax_by(&scored, |s| -s.metrics.system_power_hat).expect("non-empty");
        return Ok(pick(best, Reason::BudgetConstrainedMaxThroughput));
    }
    let best = argmax_by(&scored, |s| s.metrics.throughput_hat).expect("non-empty");
    Ok(pick(best, Reason::FallbackMaxThroughput))
}

/// One-shot selection using the biases held in `state`.
pub fn select_config(
    candidates: &[OperatingPoint],
    targets: &Targets,
    predictor: &dyn PointPredictor,
    state: &ControllerState,
) -> Result<Decision> {
    let (point, reason, predicted) = select_with_bias(candidates, targets, predictor, state.bias, state.power_bias)?;
    Ok(Decision {
        point,
        applied: point != state.current_point,
        reason,
        error: 0.0,
        bias: state.bias,
        predicted: Some(predicted),
    })
}

fn hold(state: &ControllerState, error: f64) -> Decision {
    Decision {
        point: state.current_point,
        applied: false,
        reason: Reason::HoldHysteresis,
        error,
        bias: state.bias,
        predicted: None,
    }
}

/// One iteration of the feedback loop.
///
/// The biases are driven by the relative prediction error at the
/// configuration that produced the telemetry, so they converge to the ratio
/// of measured to predicted values. The target deviation
/// `(target - measured) / target` only gates when a new choice is applied.
/// Biases keep adapting while a choice is held.
pub fn control_step(
    telemetry: &TelemetrySample,
    targets: &Targets,
    candidates: &[OperatingPoint],
    predictor: &dyn PointPredictor,
    state: &ControllerState,
    config: &ControllerConfig,
    coeffs: &SystemPowerCoeffs,
) -> Result<(Decision, ControllerState)> {
    targets.validate()?;
    let error = targets.normalized_error(telemetry.throughput);
    if let Some(last) = state.last_t {
        if !(telemetry.t > last) {
            return Ok((hold(state, error), state.clone()));
        }
    }
    let mut next = state.clone();
    next.last_t = Some(telemetry.t);

    // Learn only from intervals that ran entirely at the current point.
    let cur = state.current_point;
    let steady = telemetry.power_cap == cur.power_cap && telemetry.batch_cap == cur.batch_size;
    if steady && telemetry.active_batch > 0 {
        let observed = cur.with_batch(telemetry.active_batch);
        let raw = predictor.predict_point(&observed)?;
        let predicted_t = raw.throughput_hat * state.bias;
        if predicted_t > 0.0 {
            let r = (telemetry.throughput - predicted_t) / predicted_t;
            let factor = next.pid.step(r, config);
            next.bias = (state.bias * factor).clamp(config.bias_min, config.bias_max);
        }
        let predicted_p = raw.system_power_hat * state.power_bias;
        if predicted_p > 0.0 {
            let measured_p = telemetry.system_power(cur.dp, coeffs);
            let r = (measured_p - predicted_p) / predicted_p;
            let factor = next.power_pid.step(r, config);
            next.power_bias = (state.power_bias * factor).clamp(config.bias_min, config.bias_max);
        }
    }

    let over_budget = match targets.power_budget {
        Some(b) => (telemetry.system_power(cur.dp, coeffs) - b) / b,
        None => 0.0,
    };
    let deviation = error.abs().max(over_budget);
    if deviation > targets.epsilon {
        next.sustain_counter += 1;
    } else {
        next.sustain_counter = 0;
    }
    let targets_changed = state.last_targets.as_ref() != Some(targets);
    next.last_targets = Some(*targets);

    let (point, reason, predicted) = select_with_bias(candidates, targets, predictor, next.bias, next.power_bias)?;
    let act = targets_changed || next.sustain_counter >= config.n_sustain;
    let decision = if point == cur {
        if act {
            next.sustain_counter = 0;
        }
        Decision {
            point,
            applied: false,
            reason,
            error,
            bias: next.bias,
            predicted: Some(predicted),
        }
    } else if act {
        next.sustain_counter = 0;
        next.current_point = point;
        Decision {
            point,
            applied: true,
            reason,
            error,
            bias: next.bias,
            predicted: Some(predicted),
        }
    } else {
        let mut d = hold(&next, error);
        d.bias = next.bias;
        d
    };
    Ok((decision, next))
}

/// Caps x batches at fixed parallelism, in canonical order.
pub fn candidate_grid(caps: &[f64], batches: &[u32], tp: u32, ep: u32, dp: u32) -> Vec<OperatingPoint> {
    let mut out: Vec<OperatingPoint> = caps
        .iter()
        .flat_map(|&c| batches.iter().map(move |&b| OperatingPoint::new(c, b, tp, ep, dp)))
        .collect();
    canonical_order(&mut out);
    out
}

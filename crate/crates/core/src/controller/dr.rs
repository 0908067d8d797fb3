use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{control_step, ControllerConfig, ControllerState, Decision, TelemetrySample, Targets};
use crate::error::{Error, Result};
use crate::predictor::PointPredictor;
use crate::{OperatingPoint, SystemPowerCoeffs};

/// Piecewise-constant power budget over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetTrace {
    /// (t seconds, watts), strictly increasing in t, first entry at t <= 0.
    pub points: Vec<(f64, f64)>,
}

impl BudgetTrace {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Data("budget trace is empty".into()));
        }
        if points[0].0 > 0.0 {
            return Err(Error::Data("budget trace must start at t <= 0".into()));
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Data("budget trace times must be strictly increasing".into()));
        }
        if points.iter().any(|(t, w)| !t.is_finite() || !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Data("budget trace values must be finite and positive".into()));
        }
        Ok(BudgetTrace { points })
    }

    pub fn constant(watts: f64) -> Result<Self> {
        Self::new(vec![(0.0, watts)])
    }

    /// Two-column CSV with header `t_seconds,watts`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut pts = Vec::new();
        for row in rdr.deserialize() {
            let (t, w): (f64, f64) = row?;
            pts.push((t, w));
        }
        Self::new(pts)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t_seconds", "watts"])?;
        for (t, p) in &self.points {
            w.write_record([t.to_string(), p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn at(&self, t: f64) -> f64 {
        let i = self.points.partition_point(|(ti, _)| *ti <= t);
        self.points[i.saturating_sub(1)].1
    }

    pub fn min(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn dynamic_range(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        BudgetTrace {
            points: self.points.iter().map(|(t, w)| (*t, w * factor)).collect(),
        }
    }
}

/// One interval of a demand-response run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrRecord {
    /// End of the interval.
    pub t: f64,
    /// Budget in force during the interval.
    pub budget: f64,
    pub measured_power: f64,
    pub throughput: f64,
    /// `measured_power - budget`.
    pub tracking_error: f64,
    pub decision: Decision,
}

/// Runs one node in budget-tracking mode for `duration` seconds.
///
/// `measure(t_start, point)` plays the interval starting at `t_start` at
/// `point` and returns its telemetry; the decision taken on it applies from
/// the next interval on.
#[allow(clippy::too_many_arguments)]
pub fn dr_track(
    trace: &BudgetTrace,
    duration: f64,
    candidates: &[OperatingPoint],
    predictor: &dyn PointPredictor,
    config: &ControllerConfig,
    coeffs: &SystemPowerCoeffs,
    initial: OperatingPoint,
    mut measure: impl FnMut(f64, &OperatingPoint) -> Result<TelemetrySample>,
) -> Result<Vec<DrRecord>> {
    config.validate()?;
    if !(duration > 0.0) {
        return Err(Error::Config("duration must be positive".into()));
    }
    let n = (duration / config.interval).round() as usize;
    let mut state = ControllerState::new(initial);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let t0 = k as f64 * config.interval;
        let budget = trace.at(t0);
        let point = state.current_point;
        let telemetry = measure(t0, &point)?;
        let measured_power = telemetry.system_power(point.dp, coeffs);
        let next_budget = trace.at(t0 + config.interval);
        let targets = Targets::budget_only(next_budget, config.epsilon)?;
        let (decision, next) = control_step(&telemetry, &targets, candidates, predictor, &state, config, coeffs)?;
        state = next;
        out.push(DrRecord {
            t: telemetry.t,
            budget,
            measured_power,
            throughput: telemetry.throughput,
            tracking_error: measured_power - budget,
            decision,
        });
    }
    Ok(out)
}

//! Tree-ensemble surrogate of the power/performance surface.
//!
//! A [`Predictor`] holds two random forests, one for throughput and one for
//! mean per-GPU power, trained on profiling records of one or more models.
//! Model identity enters as a one-hot block so a single predictor can serve
//! every node of a heterogeneous cluster.

mod forest;
mod tree;

pub use forest::{EnsembleModel, Hyperparams};
pub use tree::{RegressionTree, TreeNode};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perf::deployment_system_power;
use crate::profiler::ProfilingRecord;
use crate::{OperatingPoint, PerfModel, SystemPowerCoeffs};

/// Version tag written into serialized predictors.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Names of the numeric features, in column order.
pub const NUMERIC_FEATURES: [&str; 5] = ["power_cap", "batch_size", "tp", "ep", "dp"];

/// Query for the predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub cap: f64,
    pub batch: f64,
    pub tp: f64,
    pub ep: f64,
    pub dp: f64,
    pub model_id: String,
}

impl FeatureVector {
    pub fn new(model_id: &str, point: &OperatingPoint) -> Self {
        FeatureVector {
            cap: point.power_cap,
            batch: point.batch_size as f64,
            tp: point.tp as f64,
            ep: point.ep as f64,
            dp: point.dp as f64,
            model_id: model_id.to_string(),
        }
    }
}

/// Column layout: numeric knobs followed by a one-hot model block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    /// Sorted, unique.
    pub model_ids: Vec<String>,
}

impl FeatureSpace {
    pub fn new(ids: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = ids.into_iter().collect();
        FeatureSpace {
            model_ids: set.into_iter().collect(),
        }
    }

    pub fn width(&self) -> usize {
        NUMERIC_FEATURES.len() + self.model_ids.len()
    }

    pub fn names(&self) -> Vec<String> {
        NUMERIC_FEATURES
            .iter()
            .map(|s| s.to_string())
            .chain(self.model_ids.iter().map(|id| format!("model={id}")))
            .collect()
    }

    pub fn encode(&self, fv: &FeatureVector) -> Result<Vec<f64>> {
        let slot = self
            .model_ids
            .binary_search(&fv.model_id)
            .map_err(|_| Error::UnknownProfile(fv.model_id.clone()))?;
        let mut row = vec![fv.cap, fv.batch, fv.tp, fv.ep, fv.dp];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        row.extend((0..self.model_ids.len()).map(|i| if i == slot { 1.0 } else { 0.0 }));
        Ok(row)
    }
}

/// Predictor output for one operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedMetrics {
    pub throughput_hat: f64,
    /// Mean per-GPU power.
    pub power_hat: f64,
    /// Wall power of all nodes in the deployment.
    pub system_power_hat: f64,
    pub efficiency_hat: f64,
}

impl PredictedMetrics {
    pub fn from_parts(throughput_hat: f64, power_hat: f64, dp: u32, coeffs: &SystemPowerCoeffs) -> Self {
        let system_power_hat = deployment_system_power(power_hat, dp, coeffs);
        PredictedMetrics {
            throughput_hat,
            power_hat,
            system_power_hat,
            efficiency_hat: throughput_hat / system_power_hat,
        }
    }
}

/// Anything that can score an operating point of one fixed model.
pub trait PointPredictor {
    fn predict_point(&self, point: &OperatingPoint) -> Result<PredictedMetrics>;
}

/// Which quantity an ensemble regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Throughput,
    Power,
    Efficiency,
}

impl Target {
    fn value(self, r: &ProfilingRecord) -> f64 {
        match self {
            Target::Throughput => r.measured_throughput,
            Target::Power => r.measured_gpu_power,
            Target::Efficiency => r.efficiency(),
        }
    }
}

/// Mean absolute percentage errors, as fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    pub throughput: f64,
    pub power: f64,
}

/// Mean of `|pred - truth| / truth`.
pub fn mape(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::Data("MAPE needs equally sized, non-empty inputs".into()));
    }
    if truth.contains(&0.0) {
        return Err(Error::Data("MAPE undefined for zero ground truth".into()));
    }
    let sum: f64 = predicted.iter().zip(truth).map(|(p, t)| ((p - t) / t).abs()).sum();
    Ok(sum / predicted.len() as f64)
}

/// Orders records by identity then measurements, so training does not depend
/// on input order.
fn canonical(records: &[ProfilingRecord]) -> Vec<&ProfilingRecord> {
    let mut rows: Vec<&ProfilingRecord> = records.iter().collect();
    rows.sort_by(|a, b| {
        a.model
            .cmp(&b.model)
            .then(a.power_cap.total_cmp(&b.power_cap))
            .then(a.batch_size.cmp(&b.batch_size))
            .then(a.tp.cmp(&b.tp))
            .then(a.ep.cmp(&b.ep))
            .then(a.dp.cmp(&b.dp))
            .then(a.measured_throughput.total_cmp(&b.measured_throughput))
            .then(a.measured_gpu_power.total_cmp(&b.measured_gpu_power))
            .then(a.measured_sys_power.total_cmp(&b.measured_sys_power))
    });
    rows
}

fn design_matrix(space: &FeatureSpace, rows: &[&ProfilingRecord]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|r| space.encode(&FeatureVector::new(&r.model, &r.point())))
        .collect()
}

fn fit_target(
    space: &FeatureSpace,
    rows: &[&ProfilingRecord],
    target: Target,
    hyper: &Hyperparams,
    seed: u64,
) -> Result<EnsembleModel> {
    let x = design_matrix(space, rows)?;
    let y: Vec<f64> = rows.iter().map(|r| target.value(r)).collect();
    EnsembleModel::fit(&x, &y, hyper, seed)
}

fn ranked(names: Vec<String>, scores: Vec<f64>) -> Vec<(String, f64)> {
    let mut out: Vec<(usize, String, f64)> = names.into_iter().zip(scores).enumerate().map(|(i, (n, s))| (i, n, s)).collect();
    out.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    out.into_iter().map(|(_, n, s)| (n, s)).collect()
}

/// Trained throughput and power surrogates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub format_version: u32,
    pub features: FeatureSpace,
    pub hyperparams: Hyperparams,
    pub seed: u64,
    pub coeffs: SystemPowerCoeffs,
    pub throughput: EnsembleModel,
    pub power: EnsembleModel,
}

impl Predictor {
    pub fn train(records: &[ProfilingRecord], hyper: &Hyperparams, seed: u64, coeffs: SystemPowerCoeffs) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        let rows = canonical(records);
        let space = FeatureSpace::new(rows.iter().map(|r| r.model.clone()));
        // Distinct bootstrap streams for the two targets.
        let throughput = fit_target(&space, &rows, Target::Throughput, hyper, seed)?;
        let power = fit_target(&space, &rows, Target::Power, hyper, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        Ok(Predictor {
            format_version: MODEL_FORMAT_VERSION,
            features: space,
            hyperparams: hyper.clone(),
            seed,
            coeffs,
            throughput,
            power,
        })
    }

    pub fn predict(&self, fv: &FeatureVector) -> Result<PredictedMetrics> {
        let row = self.features.encode(fv)?;
        let dp = fv.dp.round().max(1.0) as u32;
        Ok(PredictedMetrics::from_parts(
            self.throughput.predict(&row),
            self.power.predict(&row),
            dp,
            &self.coeffs,
        ))
    }

    pub fn predict_for(&self, model_id: &str, point: &OperatingPoint) -> Result<PredictedMetrics> {
        self.predict(&FeatureVector::new(model_id, point))
    }

    /// View of this predictor fixed to one model.
    pub fn bind<'a>(&'a self, model_id: &str) -> Result<BoundPredictor<'a>> {
        if self.features.model_ids.binary_search_by(|m| m.as_str().cmp(model_id)).is_err() {
            return Err(Error::UnknownProfile(model_id.to_string()));
        }
        Ok(BoundPredictor {
            predictor: self,
            model_id: model_id.to_string(),
        })
    }

    /// Pooled MAPE over `heldout`.
    pub fn evaluate_mape(&self, heldout: &[ProfilingRecord]) -> Result<Mape> {
        if heldout.is_empty() {
            return Err(Error::Data("held-out set is empty".into()));
        }
        let mut pt = Vec::with_capacity(heldout.len());
        let mut pp = Vec::with_capacity(heldout.len());
        for r in heldout {
            let m = self.predict_for(&r.model, &r.point())?;
            pt.push(m.throughput_hat);
            pp.push(m.power_hat);
        }
        let tt: Vec<f64> = heldout.iter().map(|r| r.measured_throughput).collect();
        let tpw: Vec<f64> = heldout.iter().map(|r| r.measured_gpu_power).collect();
        Ok(Mape {
            throughput: mape(&pt, &tt)?,
            power: mape(&pp, &tpw)?,
        })
    }

    /// MAPE broken down by model identifier.
    pub fn per_model_mape(&self, heldout: &[ProfilingRecord]) -> Result<BTreeMap<String, Mape>> {
        let mut groups: BTreeMap<String, Vec<ProfilingRecord>> = BTreeMap::new();
        for r in heldout {
            groups.entry(r.model.clone()).or_default().push(r.clone());
        }
        groups
            .into_iter()
            .map(|(id, rows)| Ok((id, self.evaluate_mape(&rows)?)))
            .collect()
    }

    /// Ranked importance of each feature for the throughput or power
    /// ensemble. Use [`efficiency_importance`] for the efficiency target.
    pub fn feature_importance(&self, target: Target) -> Result<Vec<(String, f64)>> {
        let model = match target {
            Target::Throughput => &self.throughput,
            Target::Power => &self.power,
            Target::Efficiency => {
                return Err(Error::Config(
                    "the efficiency target is not stored in the predictor; use efficiency_importance".into(),
                ))
            }
        };
        Ok(ranked(self.features.names(), model.importance()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let p: Predictor = serde_json::from_slice(&bytes)?;
        if p.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "model format version {} not supported (expected {MODEL_FORMAT_VERSION})",
                p.format_version
            )));
        }
        Ok(p)
    }
}

/// Trains a throwaway ensemble on tokens/J and ranks its features.
pub fn efficiency_importance(records: &[ProfilingRecord], hyper: &Hyperparams, seed: u64) -> Result<Vec<(String, f64)>> {
    if records.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let rows = canonical(records);
    let space = FeatureSpace::new(rows.iter().map(|r| r.model.clone()));
    let model = fit_target(&space, &rows, Target::Efficiency, hyper, seed)?;
    Ok(ranked(space.names(), model.importance()))
}

/// A [`Predictor`] restricted to one model.
#[derive(Clone, Debug)]
pub struct BoundPredictor<'a> {
    predictor: &'a Predictor,
    model_id: String,
}

impl PointPredictor for BoundPredictor<'_> {
    fn predict_point(&self, point: &OperatingPoint) -> Result<PredictedMetrics> {
        self.predictor.predict_for(&self.model_id, point)
    }
}

/// Ground-truth scoring straight from the analytic model.
#[derive(Clone, Debug)]
pub struct AnalyticPredictor {
    pub model: PerfModel,
}

impl AnalyticPredictor {
    pub fn new(model: PerfModel) -> Self {
        AnalyticPredictor { model }
    }
}

impl PointPredictor for AnalyticPredictor {
    fn predict_point(&self, point: &OperatingPoint) -> Result<PredictedMetrics> {
        let e = self.model.evaluate(point)?;
        Ok(PredictedMetrics {
            throughput_hat: e.throughput,
            power_hat: e.gpu_power,
            system_power_hat: e.system_power,
            efficiency_hat: e.efficiency,
        })
    }
}

/// Predictor backed by a closure.
pub struct FnPredictor<F>(pub F);

impl<F> PointPredictor for FnPredictor<F>
where
    F: Fn(&OperatingPoint) -> Result<PredictedMetrics>,
{
    fn predict_point(&self, point: &OperatingPoint) -> Result<PredictedMetrics> {
        (self.0)(point)
    }
}

/// Predictor answering from a fixed table of points.
#[derive(Clone, Debug, Default)]
pub struct TablePredictor {
    entries: Vec<(OperatingPoint, PredictedMetrics)>,
}

impl TablePredictor {
    pub fn new(entries: Vec<(OperatingPoint, PredictedMetrics)>) -> Self {
        TablePredictor { entries }
    }
}

impl PointPredictor for TablePredictor {
    fn predict_point(&self, point: &OperatingPoint) -> Result<PredictedMetrics> {
        self.entries
            .iter()
            .find(|(p, _)| p == point)
            .map(|(_, m)| *m)
            .ok_or_else(|| Error::Data(format!("no prediction for {point:?}")))
    }
}

#[cfg(test)]
mod tests;

//! Frontier construction over knob regimes, dominance checks and run
//! summaries.

mod summary;

pub use summary::{markdown_report, summarize, IntervalRow, MetricsSummary};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{OperatingPoint, PerfModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub point: OperatingPoint,
    pub throughput: f64,
    pub efficiency: f64,
}

impl FrontierPoint {
    /// Weak dominance: at least as good on both axes.
    pub fn weakly_dominates(&self, other: &FrontierPoint) -> bool {
        self.throughput >= other.throughput && self.efficiency >= other.efficiency
    }

    /// At least as good on both axes and strictly better on one.
    pub fn dominates(&self, other: &FrontierPoint) -> bool {
        self.weakly_dominates(other) && (self.throughput > other.throughput || self.efficiency > other.efficiency)
    }
}

/// Maximal points under (throughput, efficiency) dominance, sorted by
/// ascending throughput. Of points equal on both axes only the one with the
/// lowest cap (then smallest batch) is kept.
pub fn build_frontier(points: &[FrontierPoint]) -> Vec<FrontierPoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        b.throughput
            .total_cmp(&a.throughput)
            .then(b.efficiency.total_cmp(&a.efficiency))
            .then(a.point.power_cap.total_cmp(&b.point.power_cap))
            .then(a.point.batch_size.cmp(&b.point.batch_size))
            .then(a.point.tp.cmp(&b.point.tp))
    });
    let mut out: Vec<FrontierPoint> = Vec::new();
    for p in sorted {
        // Everything kept so far has throughput >= p's, so p survives only
        // by beating all of them on efficiency.
        if out.last().is_none_or(|best| p.efficiency > best.efficiency) {
            out.push(p);
        }
    }
    out.reverse();
    out
}

/// Result of [`verify_dominance`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceCheck {
    pub holds: bool,
    /// Points of the second frontier no point of the first weakly dominates.
    pub witnesses: Vec<FrontierPoint>,
}

/// Whether every point of `b` is weakly dominated by some point of `a`.
pub fn verify_dominance(a: &[FrontierPoint], b: &[FrontierPoint]) -> DominanceCheck {
    let witnesses: Vec<FrontierPoint> = b
        .iter()
        .filter(|q| !a.iter().any(|p| p.weakly_dominates(q)))
        .copied()
        .collect();
    DominanceCheck {
        holds: witnesses.is_empty(),
        witnesses,
    }
}

/// Peak efficiency of a frontier (0 when empty).
pub fn peak_efficiency(frontier: &[FrontierPoint]) -> f64 {
    frontier.iter().map(|p| p.efficiency).fold(0.0, f64::max)
}

/// Standard power caps of the frontier study.
pub const REGIME_CAPS: [f64; 6] = [150.0, 200.0, 250.0, 300.0, 350.0, 400.0];
/// Standard batch sizes of the frontier study.
pub const REGIME_BATCHES: [u32; 6] = [1, 4, 8, 16, 32, 64];
/// Cap held fixed by the software-only regime.
pub const SW_ONLY_CAP: f64 = 300.0;
/// Batch held fixed by the hardware-only regime.
pub const HW_ONLY_BATCH: u32 = 64;

/// Which knobs a regime may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Batch size and TP; cap fixed.
    SwOnly,
    /// Cap only; batch fixed.
    HwOnly,
    /// Cap and batch at the deployment TP.
    HwSw,
    /// Cap, batch and TP.
    FullJoint,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::SwOnly, Regime::HwOnly, Regime::HwSw, Regime::FullJoint];

    pub fn name(&self) -> &'static str {
        match self {
            Regime::SwOnly => "sw_only",
            Regime::HwOnly => "hw_only",
            Regime::HwSw => "hw_sw",
            Regime::FullJoint => "full_joint",
        }
    }

    /// Default knob lists of this regime for a model deployed at `tp`.
    pub fn preset(&self, tp: u32) -> RegimePreset {
        let caps = REGIME_CAPS.to_vec();
        let batches = REGIME_BATCHES.to_vec();
        let (caps, batches, tps) = match self {
            Regime::SwOnly => (vec![SW_ONLY_CAP], batches, vec![1, 2, 4]),
            Regime::HwOnly => (caps, vec![HW_ONLY_BATCH], vec![tp]),
            Regime::HwSw => (caps, batches, vec![tp]),
            Regime::FullJoint => (caps, batches, vec![1, 2, 4]),
        };
        RegimePreset {
            name: self.name().to_string(),
            caps,
            batches,
            tps,
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Regime::ALL.iter().map(|r| r.name()).collect();
                Error::Config(format!("unknown regime `{s}`; valid presets: {}", valid.join(", ")))
            })
    }
}

/// Knob lists swept for one regime. EP and DP stay at the deployment values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimePreset {
    pub name: String,
    pub caps: Vec<f64>,
    pub batches: Vec<u32>,
    pub tps: Vec<u32>,
}

impl RegimePreset {
    /// Evaluates every realizable point of the preset on `model`.
    pub fn evaluate(&self, model: &PerfModel) -> Result<Vec<FrontierPoint>> {
        let dep = model.profile.deployment;
        let mut out = Vec::new();
        for &cap in &self.caps {
            for &batch in &self.batches {
                for &tp in &self.tps {
                    let point = OperatingPoint::new(cap, batch, tp, dep.ep, dep.dp);
                    if model.profile.check_point(&point).is_err() {
                        continue;
                    }
                    let e = model.evaluate(&point)?;
                    out.push(FrontierPoint {
                        point,
                        throughput: e.throughput,
                        efficiency: e.efficiency,
                    });
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config(format!("regime {} has no realizable point", self.name)));
        }
        Ok(out)
    }
}

/// Frontier of `regime` on `model` with the default preset.
pub fn regime_frontier(model: &PerfModel, regime: Regime) -> Result<Vec<FrontierPoint>> {
    let preset = regime.preset(model.profile.deployment.tp);
    Ok(build_frontier(&preset.evaluate(model)?))
}

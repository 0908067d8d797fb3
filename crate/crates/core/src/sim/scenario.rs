use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{BudgetTrace, ControllerConfig};
use crate::error::{Error, Result};
use crate::predictor::Hyperparams;
use crate::{Deployment, GpuSpec, SystemPowerCoeffs};

/// Control policy driving every node of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Maximum cap and batch, never changed.
    Fixed,
    /// Batch cap adapted, power cap held at the platform maximum.
    AdaptiveBatch,
    /// Power cap adapted, batch cap held at the largest candidate.
    AdaptiveCap,
    /// Joint cap and batch control with the trained predictor.
    #[default]
    Pals,
    /// Exhaustive search on the analytic model every interval.
    Oracle,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Fixed,
        Policy::AdaptiveBatch,
        Policy::AdaptiveCap,
        Policy::Pals,
        Policy::Oracle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Fixed => "fixed",
            Policy::AdaptiveBatch => "adaptive-batch",
            Policy::AdaptiveCap => "adaptive-cap",
            Policy::Pals => "pals",
            Policy::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Policy> {
        Policy::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Policy::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown policy `{s}`; valid: {}", names.join(", ")))
        })
    }
}

/// Log-normal output-length distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqLenDist {
    /// Mean output length, tokens.
    pub mean: f64,
    /// Standard deviation of the underlying normal (log space).
    pub spread: f64,
}

impl Default for SeqLenDist {
    fn default() -> Self {
        SeqLenDist {
            mean: 128.0,
            spread: 0.5,
        }
    }
}

/// One deployment of the cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub model: String,
    /// Defaults to the profile's deployment.
    #[serde(default)]
    pub deployment: Option<Deployment>,
    /// Throughput target as a fraction of the throughput at maximum cap and
    /// batch.
    pub qos_fraction: f64,
    /// Requests/s. Mutually exclusive with `load`.
    #[serde(default)]
    pub arrival_rate: Option<f64>,
    /// Offered token rate as a multiple of the throughput at maximum cap and
    /// batch. Mutually exclusive with `arrival_rate`.
    #[serde(default)]
    pub load: Option<f64>,
    #[serde(default)]
    pub seq_len: Option<SeqLenDist>,
}

/// Runtime configuration grid at the static parallelism of each node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpec {
    pub caps: Vec<f64>,
    pub batches: Vec<u32>,
}

impl Default for CandidateSpec {
    fn default() -> Self {
        CandidateSpec {
            caps: (0..13).map(|i| 100.0 + 25.0 * i as f64).collect(),
            batches: vec![1, 2, 4, 8, 16, 24, 32, 48, 64],
        }
    }
}

/// How the predictor used by the adaptive policies is obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorSpec {
    /// Load a trained model instead of profiling and training in-process.
    pub model_file: Option<PathBuf>,
    /// Measurement noise of the in-process profiling sweep.
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub train_seed: u64,
    pub hyperparams: Hyperparams,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec {
            model_file: None,
            noise_sigma: 0.02,
            noise_seed: 1,
            train_seed: 2,
            hyperparams: Hyperparams::default(),
        }
    }
}

/// Budget trace given inline or as a CSV file next to the scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    File(PathBuf),
    Points(Vec<(f64, f64)>),
}

fn default_interval() -> f64 {
    0.5
}

fn default_brake_tolerance() -> f64 {
    0.02
}

fn default_reallocation_period() -> f64 {
    30.0
}

/// A complete simulation setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Seconds of simulated time.
    pub duration: f64,
    #[serde(default = "default_interval")]
    pub interval: f64,
    pub seed: u64,
    pub nodes: Vec<NodeSpec>,
    /// Default request rate for nodes that set neither rate nor load.
    #[serde(default)]
    pub arrival_rate: Option<f64>,
    #[serde(default)]
    pub seq_len: SeqLenDist,
    /// Constant cluster wall-power budget, watts.
    #[serde(default)]
    pub cluster_budget: Option<f64>,
    /// Time-varying cluster budget; switches nodes to maximum-throughput
    /// tracking mode.
    #[serde(default)]
    pub budget_trace: Option<TraceSource>,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub candidates: CandidateSpec,
    #[serde(default)]
    pub predictor: PredictorSpec,
    /// Relative budget overshoot that engages the power brake.
    #[serde(default = "default_brake_tolerance")]
    pub brake_tolerance: f64,
    /// Seconds between budget re-allocations at constant cluster budget.
    #[serde(default = "default_reallocation_period")]
    pub reallocation_period: f64,
    #[serde(default)]
    pub gpu: Option<GpuSpec>,
    #[serde(default)]
    pub coeffs: SystemPowerCoeffs,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)?;
        let mut s: Scenario = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        s.validate()?;
        Ok(s)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scenario {}: {m}", self.name)));
        if !(self.duration > 0.0) {
            return bad("duration must be positive".into());
        }
        if !(self.interval > 0.0) {
            return bad("interval must be positive".into());
        }
        if self.nodes.is_empty() {
            return bad("at least one node is required".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !(n.qos_fraction > 0.0 && n.qos_fraction <= 1.0) {
                return bad(format!("node {i}: qos_fraction must lie in (0, 1]"));
            }
            match (n.arrival_rate, n.load) {
                (Some(_), Some(_)) => return bad(format!("node {i}: set arrival_rate or load, not both")),
                (Some(r), None) if !(r >= 0.0) => return bad(format!("node {i}: arrival_rate must be >= 0")),
                (None, Some(l)) if !(l >= 0.0) => return bad(format!("node {i}: load must be >= 0")),
                (None, None) if self.arrival_rate.is_none() => {
                    return bad(format!("node {i}: no arrival rate or load given"))
                }
                _ => {}
            }
            let d = n.seq_len.unwrap_or(self.seq_len);
            if !(d.mean >= 1.0 && d.spread >= 0.0) {
                return bad(format!("node {i}: seq_len needs mean >= 1 and spread >= 0"));
            }
        }
        if self.arrival_rate.is_some_and(|r| !(r >= 0.0)) {
            return bad("arrival_rate must be >= 0".into());
        }
        if self.candidates.caps.is_empty() || self.candidates.batches.is_empty() {
            return bad("candidate caps and batches must be non-empty".into());
        }
        if self.candidates.batches.contains(&0) {
            return bad("candidate batches must be >= 1".into());
        }
        if self.cluster_budget.is_some() && self.budget_trace.is_some() {
            return bad("set cluster_budget or budget_trace, not both".into());
        }
        if !(self.brake_tolerance >= 0.0) || !(self.reallocation_period > 0.0) {
            return bad("brake_tolerance must be >= 0 and reallocation_period > 0".into());
        }
        self.controller.validate()
    }

    pub fn budget_trace(&self) -> Result<Option<BudgetTrace>> {
        match &self.budget_trace {
            None => Ok(self.cluster_budget.map(BudgetTrace::constant).transpose()?),
            Some(TraceSource::Points(p)) => Ok(Some(BudgetTrace::new(p.clone())?)),
            Some(TraceSource::File(f)) => Ok(Some(BudgetTrace::read_csv(&self.resolve(f))?)),
        }
    }

    /// Whether nodes track a time-varying budget instead of QoS targets.
    pub fn tracking_mode(&self) -> bool {
        self.budget_trace.is_some()
    }
}

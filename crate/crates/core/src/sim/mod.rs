//! Interval-stepped simulator of a GPU cluster serving LLM decode traffic.
//!
//! Within an interval every node runs a fluid continuous-batching model:
//! all running sequences advance at one token per decode step, the step time
//! and GPU draw come from the analytic model at the cap in force and the
//! current batch, and requests join or leave the batch the moment they
//! arrive or finish. Partial steps therefore carry across interval
//! boundaries without loss. Controllers act at interval boundaries; a new
//! batch cap takes effect in the next interval (excess sequences are
//! preempted back to the queue), a new power cap one interval later.

mod scenario;
mod workload;

pub use scenario::{CandidateSpec, NodeSpec, Policy, PredictorSpec, Scenario, SeqLenDist, TraceSource};
pub use workload::{generate_arrivals, stream_hash, Arrival};

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{summarize, IntervalRow, MetricsSummary};
use crate::controller::{
    allocate_budget, candidate_grid, control_step, select_with_bias, AllocationRequest, BudgetTrace, ControllerState,
    Reason, TelemetrySample, Targets, DEFAULT_QUANTUM,
};
use crate::error::{Error, Result};
use crate::perf::GPUS_PER_NODE;
use crate::predictor::{AnalyticPredictor, PointPredictor, PredictedMetrics, Predictor};
use crate::profiler::{run_sweep, SimulatedBackend, SweepGrid, SweepOptions};
use crate::{Deployment, GpuSpec, OperatingPoint, PerfModel, ProfileRegistry, SystemPowerCoeffs};

/// Sequences the next decode step runs with: everything running plus as
/// much of the queue as the cap admits.
pub fn effective_batch(queue_depth: u64, running: u64, batch_cap: u32) -> u32 {
    (running + queue_depth).min(batch_cap as u64) as u32
}

/// Memoizes predictions; the sim queries the same few hundred points over
/// and over.
/// Cap bits, batch, tp, ep, dp.
type PointKey = (u64, u32, u32, u32, u32);

struct Memo<'a> {
    inner: &'a dyn PointPredictor,
    cache: RefCell<HashMap<PointKey, PredictedMetrics>>,
}

impl<'a> Memo<'a> {
    fn new(inner: &'a dyn PointPredictor) -> Self {
        Memo {
            inner,
            cache: RefCell::new(HashMap::new()),
        }
    }
}

impl PointPredictor for Memo<'_> {
    fn predict_point(&self, p: &OperatingPoint) -> Result<PredictedMetrics> {
        let key = (p.power_cap.to_bits(), p.batch_size, p.tp, p.ep, p.dp);
        if let Some(m) = self.cache.borrow().get(&key) {
            return Ok(*m);
        }
        let m = self.inner.predict_point(p)?;
        self.cache.borrow_mut().insert(key, m);
        Ok(m)
    }
}

/// Lifetime of one request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub node: String,
    pub id: usize,
    pub arrival: f64,
    pub output_len: u32,
    /// Tokens produced by the end of the run (fractional for a request cut
    /// off mid-step).
    pub generated: f64,
    pub completion: Option<f64>,
}

/// One controller decision, flattened for CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub t: f64,
    pub node: String,
    pub power_cap: f64,
    pub batch_size: u32,
    pub applied: bool,
    pub reason: String,
    pub error: f64,
    pub bias: f64,
    pub power_bias: f64,
    pub node_budget: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: String,
    pub model: String,
    pub throughput_target: f64,
    pub metrics: MetricsSummary,
    pub arrival_stream_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub scenario: String,
    pub policy: Policy,
    pub seed: u64,
    pub duration: f64,
    pub nodes: Vec<NodeSummary>,
    pub cluster: MetricsSummary,
    /// Intervals during which the budget brake forced minimum caps.
    pub brake_intervals: usize,
    /// Mean cluster throughput over intervals whose budget lies in the
    /// lowest quartile of the trace (tracking runs only).
    pub low_budget_quartile_throughput: Option<f64>,
    pub budget_dynamic_range: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimResult {
    pub intervals: Vec<IntervalRow>,
    pub decisions: Vec<DecisionRow>,
    pub requests: Vec<RequestRecord>,
    pub summary: SimSummary,
}

impl SimResult {
    pub fn node_rows(&self, node: &str) -> Vec<IntervalRow> {
        self.intervals.iter().filter(|r| r.node == node).cloned().collect()
    }

    /// Rows of all nodes added up per interval.
    pub fn cluster_rows(&self) -> Vec<IntervalRow> {
        cluster_rows(&self.intervals)
    }

    /// Writes `intervals.csv`, `decisions.csv`, `requests.csv` and
    /// `summary.json` into `dir`. Returns the written file names.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("intervals.csv"), &self.intervals)?;
        write_csv(&dir.join("decisions.csv"), &self.decisions)?;
        write_csv(&dir.join("requests.csv"), &self.requests)?;
        let mut json = serde_json::to_vec_pretty(&self.summary)?;
        json.push(b'\n');
        std::fs::write(dir.join("summary.json"), json)?;
        Ok(["intervals.csv", "decisions.csv", "requests.csv", "summary.json"]
            .map(String::from)
            .to_vec())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cluster_rows(rows: &[IntervalRow]) -> Vec<IntervalRow> {
    let mut by_t: BTreeMap<u64, IntervalRow> = BTreeMap::new();
    let mut order: Vec<u64> = Vec::new();
    for r in rows {
        let key = r.t_start.to_bits();
        match by_t.get_mut(&key) {
            Some(acc) => {
                acc.tokens += r.tokens;
                acc.throughput += r.throughput;
                acc.system_power += r.system_power;
                acc.energy += r.energy;
                acc.queue_depth += r.queue_depth;
                acc.active_batch += r.active_batch;
                acc.braked |= r.braked;
            }
            None => {
                order.push(key);
                let mut c = r.clone();
                c.node = "cluster".into();
                c.target = None;
                c.budget = None;
                by_t.insert(key, c);
            }
        }
    }
    order.into_iter().map(|k| by_t.remove(&k).expect("key present")).collect()
}

struct Running {
    id: usize,
    remaining: f64,
}

struct Node<'a> {
    name: String,
    model: PerfModel,
    dep: Deployment,
    target: f64,
    arrivals: Vec<Arrival>,
    next_arrival: usize,
    requests: Vec<RequestRecord>,
    queue: VecDeque<usize>,
    running: Vec<Running>,
    cap: f64,
    batch_cap: u32,
    /// (interval index it takes effect in, cap)
    pending_cap: Option<(usize, f64)>,
    state: ControllerState,
    candidates: Vec<OperatingPoint>,
    predictor: Option<Memo<'a>>,
    budget: Option<f64>,
    stream_hash: String,
}

struct IntervalStats {
    tokens: f64,
    /// Joules per GPU.
    gpu_energy: f64,
    busy: f64,
}

impl Node<'_> {
    fn admit_until(&mut self, t: f64) {
        while self.next_arrival < self.arrivals.len() && self.arrivals[self.next_arrival].time <= t {
            let a = self.arrivals[self.next_arrival];
            let id = self.requests.len();
            self.requests.push(RequestRecord {
                node: self.name.clone(),
                id,
                arrival: a.time,
                output_len: a.output_len,
                generated: 0.0,
                completion: None,
            });
            self.queue.push_back(id);
            self.next_arrival += 1;
        }
    }

    /// Tops the batch up from the queue. A batch above the cap (after the
    /// cap was lowered) is preempted from the back: the youngest sequences
    /// go back to the head of the queue and keep their progress.
    fn fill_batch(&mut self) {
        let limit = self.batch_cap as usize * self.dep.dp as usize;
        while self.running.len() > limit {
            let r = self.running.pop().expect("non-empty above the cap");
            self.queue.push_front(r.id);
        }
        while self.running.len() < limit {
            let Some(id) = self.queue.pop_front() else { break };
            let req = &self.requests[id];
            self.running.push(Running {
                id,
                remaining: req.output_len as f64 - req.generated,
            });
        }
    }

    /// Plays `[t0, t1)` at power cap `cap`.
    fn advance(&mut self, t0: f64, t1: f64, cap: f64) -> Result<IntervalStats> {
        let p_idle = self.model.spec.p_idle;
        let dp = self.dep.dp as usize;
        let mut stats = IntervalStats {
            tokens: 0.0,
            gpu_energy: 0.0,
            busy: 0.0,
        };
        let mut t = t0;
        while t < t1 {
            self.admit_until(t);
            self.fill_batch();
            let next_arrival = self
                .arrivals
                .get(self.next_arrival)
                .map_or(t1, |a| a.time.min(t1));
            let n = self.running.len();
            if n == 0 {
                let dt = next_arrival - t;
                stats.gpu_energy += p_idle * dt;
                t = next_arrival;
                continue;
            }
            let per_node = n.div_ceil(dp) as u32;
            let point = OperatingPoint::deployed(cap, per_node, self.dep);
            let e = self.model.evaluate(&point)?;
            // Tokens per second for each running sequence.
            let rate = 1.0 / e.timing.t_step;
            let min_remaining = self.running.iter().map(|r| r.remaining).fold(f64::INFINITY, f64::min);
            let dt = (min_remaining / rate).min(next_arrival - t).min(t1 - t);
            let step = rate * dt;
            stats.tokens += step * n as f64;
            stats.gpu_energy += e.gpu_power * dt;
            stats.busy += dt;
            t += dt;
            let requests = &mut self.requests;
            self.running.retain_mut(|r| {
                r.remaining -= step;
                let req = &mut requests[r.id];
                if r.remaining <= 1e-9 * req.output_len as f64 {
                    req.generated = req.output_len as f64;
                    req.completion = Some(t);
                    false
                } else {
                    req.generated = req.output_len as f64 - r.remaining;
                    true
                }
            });
        }
        Ok(stats)
    }

    fn system_power(&self, gpu_power: f64, coeffs: &SystemPowerCoeffs) -> f64 {
        self.dep.dp as f64 * (coeffs.alpha * GPUS_PER_NODE as f64 * gpu_power + coeffs.beta)
    }
}

fn policy_candidates(policy: Policy, spec: &CandidateSpec, gpu: &GpuSpec, dep: Deployment) -> Vec<OperatingPoint> {
    let max_batch = *spec.batches.iter().max().expect("validated non-empty");
    match policy {
        Policy::Fixed => vec![OperatingPoint::deployed(gpu.p_max_cap, max_batch, dep)],
        Policy::AdaptiveBatch => candidate_grid(&[gpu.p_max_cap], &spec.batches, dep.tp, dep.ep, dep.dp),
        Policy::AdaptiveCap => candidate_grid(&spec.caps, &[max_batch], dep.tp, dep.ep, dep.dp),
        Policy::Pals | Policy::Oracle => candidate_grid(&spec.caps, &spec.batches, dep.tp, dep.ep, dep.dp),
    }
}

/// Per-node static data shared by every policy of a scenario.
struct NodeSetup {
    name: String,
    model: PerfModel,
    dep: Deployment,
    target: f64,
    arrivals: Vec<Arrival>,
    stream_hash: String,
}

fn setup_nodes(scenario: &Scenario, registry: &ProfileRegistry) -> Result<Vec<NodeSetup>> {
    scenario.validate()?;
    let gpu = scenario.gpu.clone().unwrap_or_else(|| registry.gpu.clone());
    let max_batch = *scenario.candidates.batches.iter().max().expect("validated");
    for &c in &scenario.candidates.caps {
        gpu.check_cap(c)?;
    }
    scenario
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let profile = registry.get(&n.model)?.clone();
            let dep = n.deployment.unwrap_or(profile.deployment);
            let model = PerfModel::new(profile, gpu.clone(), scenario.coeffs)?;
            let peak = model.throughput(&OperatingPoint::deployed(gpu.p_max_cap, max_batch, dep))?;
            let dist = n.seq_len.unwrap_or(scenario.seq_len);
            let rate = match (n.arrival_rate, n.load) {
                (Some(r), _) => r,
                (None, Some(l)) => l * peak / dist.mean,
                (None, None) => scenario.arrival_rate.unwrap_or(0.0),
            };
            let arrivals = generate_arrivals(rate, dist, scenario.duration, scenario.seed, i as u64)?;
            let stream_hash = stream_hash(&arrivals);
            Ok(NodeSetup {
                name: format!("{i}-{}", n.model),
                model,
                dep,
                target: n.qos_fraction * peak,
                arrivals,
                stream_hash,
            })
        })
        .collect()
}

/// Profiles the runtime grid of every node model and trains a predictor, or
/// loads the configured model file.
pub fn prepare_predictor(scenario: &Scenario, registry: &ProfileRegistry) -> Result<Predictor> {
    let spec = &scenario.predictor;
    if let Some(f) = &spec.model_file {
        return Predictor::load(&scenario.resolve(f));
    }
    let mut backend = SimulatedBackend {
        registry: registry.clone(),
        coeffs: scenario.coeffs,
    };
    if let Some(gpu) = &scenario.gpu {
        backend.registry.gpu = gpu.clone();
    }
    let mut records = Vec::new();
    let mut seen = BTreeMap::new();
    for n in &scenario.nodes {
        let dep = n.deployment.unwrap_or(registry.get(&n.model)?.deployment);
        if seen.insert((n.model.clone(), dep.tp, dep.ep, dep.dp), ()).is_some() {
            continue;
        }
        let grid = SweepGrid {
            caps: scenario.candidates.caps.clone(),
            batches: scenario.candidates.batches.clone(),
            tps: vec![dep.tp],
            eps: vec![dep.ep],
            dps: vec![dep.dp],
        };
        let opts = SweepOptions {
            noise_seed: spec.noise_seed,
            noise_sigma: spec.noise_sigma,
            ..SweepOptions::default()
        };
        let ds = run_sweep(&grid, &n.model, &mut backend, &opts)?;
        if !ds.meta.complete {
            return Err(Error::Backend(format!("profiling sweep of {} incomplete", n.model)));
        }
        records.extend(ds.records);
    }
    Predictor::train(&records, &spec.hyperparams, spec.train_seed, scenario.coeffs)
}

/// Runs the scenario's own policy, training a predictor when it needs one.
pub fn run(scenario: &Scenario, registry: &ProfileRegistry) -> Result<SimResult> {
    let predictor = match scenario.policy {
        Policy::Fixed | Policy::Oracle => None,
        _ => Some(prepare_predictor(scenario, registry)?),
    };
    run_with(scenario, registry, scenario.policy, predictor.as_ref())
}

/// Runs every policy on identical arrival streams.
pub fn run_baseline_suite(scenario: &Scenario, registry: &ProfileRegistry) -> Result<BTreeMap<Policy, SimResult>> {
    let predictor = prepare_predictor(scenario, registry)?;
    let mut out = BTreeMap::new();
    for policy in Policy::ALL {
        out.insert(policy, run_with(scenario, registry, policy, Some(&predictor))?);
    }
    Ok(out)
}

/// Runs `scenario` under `policy`. Adaptive policies other than the oracle
/// need `predictor`.
pub fn run_with(
    scenario: &Scenario,
    registry: &ProfileRegistry,
    policy: Policy,
    predictor: Option<&Predictor>,
) -> Result<SimResult> {
    let setups = setup_nodes(scenario, registry)?;
    let trace = scenario.budget_trace()?;
    let tracking = scenario.tracking_mode();
    let coeffs = scenario.coeffs;
    let cfg = &scenario.controller;
    let dt_nominal = scenario.interval;

    let bound: Vec<Option<crate::predictor::BoundPredictor>> = setups
        .iter()
        .map(|s| match (policy, predictor) {
            (Policy::Fixed | Policy::Oracle, _) => Ok(None),
            (_, Some(p)) => p.bind(&s.model.profile.name).map(Some),
            (_, None) => Err(Error::Config(format!("policy {} needs a trained predictor", policy.name()))),
        })
        .collect::<Result<_>>()?;
    let analytic: Vec<AnalyticPredictor> = setups.iter().map(|s| AnalyticPredictor::new(s.model.clone())).collect();

    let mut nodes: Vec<Node> = setups
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let gpu = s.model.spec.clone();
            let candidates = policy_candidates(policy, &scenario.candidates, &gpu, s.dep);
            let max_batch = *scenario.candidates.batches.iter().max().expect("validated");
            let initial = OperatingPoint::deployed(gpu.p_max_cap, max_batch, s.dep);
            let predictor: Option<Memo> = match policy {
                Policy::Fixed => None,
                Policy::Oracle => Some(Memo::new(&analytic[i])),
                _ => bound[i].as_ref().map(|b| Memo::new(b as &dyn PointPredictor)),
            };
            Node {
                name: s.name,
                model: s.model,
                dep: s.dep,
                target: s.target,
                arrivals: s.arrivals,
                next_arrival: 0,
                requests: Vec::new(),
                queue: VecDeque::new(),
                running: Vec::new(),
                cap: gpu.p_max_cap,
                batch_cap: max_batch,
                pending_cap: None,
                state: ControllerState::new(initial),
                candidates,
                predictor,
                budget: None,
                stream_hash: s.stream_hash,
            }
        })
        .collect();

    let n_intervals = (scenario.duration / dt_nominal - 1e-9).ceil().max(1.0) as usize;
    let mut rows = Vec::with_capacity(n_intervals * nodes.len());
    let mut decisions = Vec::new();
    let mut brake = false;
    let mut brake_intervals = 0;
    let mut last_alloc_t = f64::NEG_INFINITY;
    let mut last_cluster_budget: Option<f64> = None;

    for k in 0..n_intervals {
        let t0 = k as f64 * dt_nominal;
        let t1 = ((k + 1) as f64 * dt_nominal).min(scenario.duration);
        let dt = t1 - t0;
        let budget_now = trace.as_ref().map(|tr| tr.at(t0));
        if brake {
            brake_intervals += 1;
        }

        let mut cluster_power = 0.0;
        let mut samples = Vec::with_capacity(nodes.len());
        for node in nodes.iter_mut() {
            if let Some((at, cap)) = node.pending_cap {
                if at <= k {
                    node.cap = cap;
                    node.pending_cap = None;
                }
            }
            let cap = if brake { node.model.spec.p_min_cap } else { node.cap };
            let stats = node.advance(t0, t1, cap)?;
            let gpu_power = stats.gpu_energy / dt;
            let system_power = node.system_power(gpu_power, &coeffs);
            cluster_power += system_power;
            let throughput = stats.tokens / dt;
            let active = node.running.len() as u32;
            rows.push(IntervalRow {
                t_start: t0,
                t_end: t1,
                node: node.name.clone(),
                power_cap: cap,
                batch_cap: node.batch_cap,
                tokens: stats.tokens,
                throughput,
                gpu_power,
                system_power,
                energy: system_power * dt,
                utilization: (stats.busy / dt).clamp(0.0, 1.0),
                queue_depth: node.queue.len() as u64,
                active_batch: active,
                target: Some(node.target),
                budget: node.budget,
                braked: brake,
            });
            samples.push(TelemetrySample {
                t: t1,
                per_gpu_power: vec![gpu_power; (GPUS_PER_NODE * node.dep.dp) as usize],
                throughput,
                utilization: (stats.busy / dt).clamp(0.0, 1.0),
                queue_depth: node.queue.len() as u64,
                active_batch: active.div_ceil(node.dep.dp),
                power_cap: cap,
                batch_cap: node.batch_cap,
            });
        }

        // Budget brake: engages after an overshoot at an unchanged budget,
        // so one interval of actuation lag after a step-down is tolerated.
        let budget_prev = if k == 0 { budget_now } else { trace.as_ref().map(|tr| tr.at(t0 - dt_nominal)) };
        brake = match (budget_now, budget_prev) {
            (Some(b), Some(prev)) if b == prev && k > 0 => cluster_power > b * (1.0 + scenario.brake_tolerance),
            _ => false,
        };

        if k + 1 == n_intervals {
            break;
        }

        // Coordinator: node budgets for the decisions taken now.
        let budget_next = trace.as_ref().map(|tr| tr.at(t1));
        if let Some(b) = budget_next {
            let changed = last_cluster_budget != Some(b);
            let due = t1 - last_alloc_t >= scenario.reallocation_period - 1e-9;
            match policy {
                Policy::Fixed => {}
                Policy::Pals | Policy::Oracle => {
                    if changed || due {
                        let requests: Vec<AllocationRequest> = nodes
                            .iter()
                            .map(|n| AllocationRequest {
                                throughput_target: if tracking { f64::INFINITY } else { n.target },
                                candidates: n.candidates.clone(),
                                predictor: n.predictor.as_ref().expect("adaptive policy has a predictor"),
                                bias: n.state.bias,
                                power_bias: n.state.power_bias,
                            })
                            .collect();
                        let spec = nodes[0].model.spec.clone();
                        let alloc = allocate_budget(&requests, b, &spec, &coeffs, DEFAULT_QUANTUM)?;
                        for (n, a) in nodes.iter_mut().zip(alloc) {
                            n.budget = Some(a);
                        }
                        last_alloc_t = t1;
                    }
                }
                Policy::AdaptiveBatch | Policy::AdaptiveCap => {
                    let share = b / nodes.len() as f64;
                    for n in nodes.iter_mut() {
                        n.budget = Some(share);
                    }
                }
            }
            last_cluster_budget = Some(b);
        }

        for (node, sample) in nodes.iter_mut().zip(samples) {
            let targets = if tracking {
                match node.budget {
                    Some(b) => Targets::budget_only(b, cfg.epsilon)?,
                    None => Targets::new(node.target, None, cfg.epsilon)?,
                }
            } else {
                Targets::new(node.target, node.budget, cfg.epsilon)?
            };
            let (point, applied, reason, error) = match policy {
                Policy::Fixed => (node.state.current_point, false, Reason::HoldHysteresis, targets.normalized_error(sample.throughput)),
                Policy::Oracle => {
                    let p = node.predictor.as_ref().expect("oracle has a predictor");
                    let (point, _, _) = select_with_bias(&node.candidates, &targets, p, 1.0, 1.0)?;
                    let applied = point != node.state.current_point;
                    node.state.current_point = point;
                    (point, applied, Reason::Exhaustive, targets.normalized_error(sample.throughput))
                }
                _ => {
                    let p = node.predictor.as_ref().expect("adaptive policy has a predictor");
                    let (d, next) = control_step(&sample, &targets, &node.candidates, p, &node.state, cfg, &coeffs)?;
                    node.state = next;
                    (d.point, d.applied, d.reason, d.error)
                }
            };
            if applied {
                node.batch_cap = point.batch_size;
                if point.power_cap != node.cap || node.pending_cap.is_some() {
                    node.pending_cap = Some((k + 2, point.power_cap));
                }
            }
            decisions.push(DecisionRow {
                t: t1,
                node: node.name.clone(),
                power_cap: point.power_cap,
                batch_size: point.batch_size,
                applied,
                reason: reason.as_str().to_string(),
                error,
                bias: node.state.bias,
                power_bias: node.state.power_bias,
                node_budget: targets.power_budget,
            });
        }
    }

    let mut requests = Vec::new();
    let mut node_summaries = Vec::new();
    for node in &nodes {
        let node_rows: Vec<IntervalRow> = rows.iter().filter(|r| r.node == node.name).cloned().collect();
        node_summaries.push(NodeSummary {
            node: node.name.clone(),
            model: node.model.profile.name.clone(),
            throughput_target: node.target,
            metrics: summarize(&node_rows, Some(node.target), None),
            arrival_stream_hash: node.stream_hash.clone(),
        });
        requests.extend(node.requests.iter().cloned());
    }
    let cluster = cluster_rows(&rows);
    let tracked = if tracking { trace.as_ref() } else { None };
    let cluster_summary = summarize(&cluster, None, tracked);
    let low_q = tracked.map(|tr| low_quartile_throughput(&cluster, tr));
    Ok(SimResult {
        intervals: rows,
        decisions,
        requests,
        summary: SimSummary {
            scenario: scenario.name.clone(),
            policy,
            seed: scenario.seed,
            duration: scenario.duration,
            nodes: node_summaries,
            cluster: cluster_summary,
            brake_intervals,
            low_budget_quartile_throughput: low_q,
            budget_dynamic_range: tracked.map(BudgetTrace::dynamic_range),
        },
    })
}

/// Mean throughput over the intervals whose budget is at or below the 25th
/// percentile of per-interval budgets.
pub fn low_quartile_throughput(cluster: &[IntervalRow], trace: &BudgetTrace) -> f64 {
    if cluster.is_empty() {
        return 0.0;
    }
    let mut budgets: Vec<f64> = cluster.iter().map(|r| trace.at(r.t_start)).collect();
    budgets.sort_by(f64::total_cmp);
    let q = budgets[(budgets.len() - 1) / 4];
    let sel: Vec<&IntervalRow> = cluster.iter().filter(|r| trace.at(r.t_start) <= q).collect();
    sel.iter().map(|r| r.throughput).sum::<f64>() / sel.len() as f64
}

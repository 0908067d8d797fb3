use crate::error::{Error, Result};
use crate::perf::GPUS_PER_NODE;
use crate::predictor::PointPredictor;
use crate::{GpuSpec, OperatingPoint, SystemPowerCoeffs};

/// Default water-filling grant, watts.
pub const DEFAULT_QUANTUM: f64 = 25.0;

/// Upper bound on quanta looked ahead when a node's throughput is flat over
/// the next grant.
const LOOKAHEAD: usize = 64;

/// One deployment competing for the cluster budget.
pub struct AllocationRequest<'a> {
    pub throughput_target: f64,
    /// Runtime candidates of the deployment (same parallelism throughout).
    pub candidates: Vec<OperatingPoint>,
    pub predictor: &'a dyn PointPredictor,
    /// Multiplicative correction on predicted throughput.
    pub bias: f64,
    /// Multiplicative correction on predicted system power.
    pub power_bias: f64,
}

/// Best achievable throughput as a step function of the node budget.
struct Frontier {
    /// (system power, best throughput at or below that power), ascending power.
    steps: Vec<(f64, f64)>,
    target: f64,
    floor: f64,
    ceiling: f64,
}

impl Frontier {
    fn build(req: &AllocationRequest, spec: &GpuSpec, coeffs: &SystemPowerCoeffs) -> Result<Frontier> {
        let dp = req
            .candidates
            .first()
            .map(|p| p.dp)
            .ok_or_else(|| Error::Config("allocation request without candidates".into()))?;
        if req.candidates.iter().any(|p| p.dp != dp) {
            return Err(Error::Config("allocation candidates must share one DP degree".into()));
        }
        let node = |cap: f64| dp as f64 * (coeffs.alpha * GPUS_PER_NODE as f64 * cap + coeffs.beta);
        let mut pts: Vec<(f64, f64)> = req
            .candidates
            .iter()
            .map(|c| {
                let m = req.predictor.predict_point(c)?;
                Ok((m.system_power_hat * req.power_bias, m.throughput_hat * req.bias))
            })
            .collect::<Result<_>>()?;
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        let mut steps = Vec::with_capacity(pts.len());
        let mut best = 0.0f64;
        for (p, t) in pts {
            if t > best {
                best = t;
                steps.push((p, t));
            }
        }
        Ok(Frontier {
            steps,
            target: req.throughput_target,
            floor: node(spec.p_min_cap),
            ceiling: node(spec.p_max_cap),
        })
    }

    fn best(&self, budget: f64) -> f64 {
        let i = self.steps.partition_point(|(p, _)| *p <= budget * (1.0 + 1e-12));
        if i == 0 {
            0.0
        } else {
            self.steps[i - 1].1
        }
    }

    fn toward_target(&self, budget: f64) -> f64 {
        if self.target.is_finite() {
            self.best(budget).min(self.target)
        } else {
            self.best(budget)
        }
    }

    fn same_as(&self, other: &Frontier) -> bool {
        self.steps == other.steps && self.target == other.target && self.floor == other.floor && self.ceiling == other.ceiling
    }

    fn satisfied(&self, budget: f64) -> bool {
        self.target.is_finite() && self.best(budget) >= self.target
    }
}

/// Best gain per watt over the next `1..=LOOKAHEAD` quanta.
fn marginal(value: impl Fn(f64) -> f64, alloc: f64, room: f64, quantum: f64) -> f64 {
    let base = value(alloc);
    let mut best = 0.0f64;
    for k in 1..=LOOKAHEAD {
        let extra = k as f64 * quantum;
        if extra > room + 1e-9 {
            break;
        }
        best = best.max((value(alloc + extra) - base) / extra);
    }
    best
}

/// Splits `cluster_budget` across deployments by water-filling.
///
/// Every node starts at the wall power it draws with all GPUs at the minimum
/// cap. Quanta then go to the node whose predicted throughput moves furthest
/// toward its target per watt (as a fraction of the target, so nodes of very
/// different speeds compete fairly). Once every target is predicted met, or
/// no node can progress, the rest goes where it buys the most throughput per
/// watt; anything still left is spread evenly up to each node's ceiling.
pub fn allocate_budget(
    requests: &[AllocationRequest],
    cluster_budget: f64,
    spec: &GpuSpec,
    coeffs: &SystemPowerCoeffs,
    quantum: f64,
) -> Result<Vec<f64>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    if !(quantum > 0.0) {
        return Err(Error::Config("allocation quantum must be positive".into()));
    }
    let frontiers: Vec<Frontier> = requests
        .iter()
        .map(|r| Frontier::build(r, spec, coeffs))
        .collect::<Result<_>>()?;
    let minimums: Vec<f64> = frontiers.iter().map(|f| f.floor).collect();
    let floor_sum: f64 = minimums.iter().sum();
    if cluster_budget < floor_sum {
        return Err(Error::InfeasibleBudget {
            budget: cluster_budget,
            minimums,
        });
    }
    let mut alloc = minimums.clone();
    let mut remaining = cluster_budget - floor_sum;

    let grant = |score: &dyn Fn(usize, f64, f64) -> f64, alloc: &mut Vec<f64>, remaining: &mut f64| -> bool {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in frontiers.iter().enumerate() {
            let room = (f.ceiling - alloc[i]).min(*remaining);
            if room < quantum - 1e-9 {
                continue;
            }
            let s = score(i, alloc[i], room);
            if s <= 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((j, bs)) => s > bs * (1.0 + 1e-12) || (s >= bs * (1.0 - 1e-12) && alloc[i] < alloc[j] - 1e-9),
            };
            if better {
                best = Some((i, s));
            }
        }
        match best {
            Some((i, _)) => {
                alloc[i] += quantum;
                *remaining -= quantum;
                true
            }
            None => false,
        }
    };

    // Phase 1: push unsatisfied nodes toward their targets.
    let toward = |i: usize, a: f64, room: f64| {
        let f = &frontiers[i];
        if !f.target.is_finite() || f.satisfied(a) {
            return 0.0;
        }
        marginal(|b| f.toward_target(b) / f.target, a, room, quantum)
    };
    while grant(&toward, &mut alloc, &mut remaining) {}

    // Phase 2: raw throughput per watt.
    let raw = |i: usize, a: f64, room: f64| {
        let f = &frontiers[i];
        marginal(|b| f.best(b), a, room, quantum)
    };
    while grant(&raw, &mut alloc, &mut remaining) {}

    // Phase 3: spread what nobody can use, up to each ceiling.
    loop {
        let open: Vec<usize> = (0..alloc.len()).filter(|&i| frontiers[i].ceiling - alloc[i] > 1e-9).collect();
        if open.is_empty() || remaining <= 1e-9 {
            break;
        }
        let share = remaining / open.len() as f64;
        for i in open {
            let add = share.min(frontiers[i].ceiling - alloc[i]);
            alloc[i] += add;
            remaining -= add;
        }
    }
    // Interchangeable nodes get the same share.
    let mut done = vec![false; alloc.len()];
    for i in 0..alloc.len() {
        if done[i] {
            continue;
        }
        let group: Vec<usize> = (i..alloc.len()).filter(|&j| !done[j] && frontiers[j].same_as(&frontiers[i])).collect();
        let mean = group.iter().map(|&j| alloc[j]).sum::<f64>() / group.len() as f64;
        for j in group {
            alloc[j] = mean;
            done[j] = true;
        }
    }
    Ok(alloc)
}

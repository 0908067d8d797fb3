//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

use std::path::{Path, PathBuf};
use std::time::Instant;

use pals::analysis::{peak_efficiency, regime_frontier, verify_dominance, Regime};
use pals::controller::{
    candidate_grid, control_step, select_with_bias, ControllerConfig, ControllerState, TelemetrySample, Targets,
};
use pals::predictor::{efficiency_importance, FnPredictor, Hyperparams, PredictedMetrics, Predictor, TablePredictor};
use pals::profiler::{run_sweep, split_holdout, write_records_csv, SimulatedBackend, SweepGrid, SweepOptions};
use pals::sim::{self, Policy, Scenario};
use pals::{OperatingPoint, PerfModel, ProfileRegistry, SystemPowerCoeffs};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn registry() -> ProfileRegistry {
    ProfileRegistry::builtin()
}

fn model(id: &str) -> PerfModel {
    let reg = registry();
    PerfModel::new(reg.get(id).unwrap().clone(), reg.gpu.clone(), SystemPowerCoeffs::default()).unwrap()
}

fn eff(m: &PerfModel, cap: f64, batch: u32) -> f64 {
    m.efficiency(&m.point(cap, batch)).unwrap()
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

const CAPS: [f64; 6] = [150.0, 200.0, 250.0, 300.0, 350.0, 400.0];

fn c1_batch_amortization() -> Outcome {
    let reg = registry();
    let mut ratios = Vec::new();
    let mut pass = true;
    for id in reg.ids() {
        let m = model(id);
        let r = eff(&m, 300.0, 64) / eff(&m, 300.0, 1);
        pass &= (1.7..=2.1).contains(&r);
        ratios.push(format!("{id}={r:.3}"));
    }
    outcome(pass, format!("tokens/J b64/b1 at 300 W in [1.7, 2.1]: {}", ratios.join(" ")))
}

fn argmax_cap(m: &PerfModel) -> f64 {
    let mut best = (CAPS[0], eff(m, CAPS[0], 64));
    for &c in &CAPS[1..] {
        let e = eff(m, c, 64);
        if e > best.1 {
            best = (c, e);
        }
    }
    best.0
}

fn c2_power_cap_peak() -> Outcome {
    let q = argmax_cap(&model("qwen1.5-moe"));
    let o = argmax_cap(&model("olmoe-1b-7b"));
    let mx = model("mixtral-8x7b");
    let knee = mx.profile.p_knee;
    // Table caps below the knee, then the knee itself.
    let mut caps: Vec<f64> = CAPS.iter().copied().filter(|c| *c < knee).collect();
    caps.push(knee);
    let effs: Vec<f64> = caps.iter().map(|c| eff(&mx, *c, 64)).collect();
    let monotone = effs.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        q == 200.0 && o == 200.0 && monotone,
        format!("argmax cap qwen={q} olmoe={o} (want 200); mixtral non-decreasing up to knee {knee:.0} W: {monotone}"),
    )
}

fn c3_marginal_batch() -> Outcome {
    let gain = |id: &str| {
        let m = model(id);
        eff(&m, 300.0, 64) / eff(&m, 300.0, 32) - 1.0
    };
    let mx = gain("mixtral-8x7b");
    let qw = gain("qwen1.5-moe");
    let pass = (mx - 0.02).abs() <= 0.015 && (qw - 0.07).abs() <= 0.015;
    outcome(
        pass,
        format!("32->64 gain mixtral={:.2}% (2+-1.5) qwen={:.2}% (7+-1.5)", mx * 100.0, qw * 100.0),
    )
}

fn c4_multi_node() -> Outcome {
    let drop = |id: &str| {
        let m = model(id);
        let p1 = m.point(300.0, 64);
        let p3 = OperatingPoint { dp: 3, ..p1 };
        1.0 - m.efficiency(&p3).unwrap() / m.efficiency(&p1).unwrap()
    };
    let q = drop("qwen1.5-moe");
    let mx = drop("mixtral-8x7b");
    let pass = (q - 0.30).abs() <= 0.05 && (mx - 0.15).abs() <= 0.05;
    outcome(
        pass,
        format!("3-node efficiency drop qwen={:.1}% (30+-5) mixtral={:.1}% (15+-5)", q * 100.0, mx * 100.0),
    )
}

fn c5_frontier() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (id, want) in [("mixtral-8x7b", 1.18), ("qwen1.5-moe", 1.13), ("olmoe-1b-7b", 1.14)] {
        let m = model(id);
        let joint = regime_frontier(&m, Regime::FullJoint).unwrap();
        let sw = regime_frontier(&m, Regime::SwOnly).unwrap();
        let hw = regime_frontier(&m, Regime::HwOnly).unwrap();
        let ratio = peak_efficiency(&joint) / peak_efficiency(&sw);
        let dom_hw = verify_dominance(&joint, &hw).holds;
        let dom_sw = verify_dominance(&joint, &sw).holds;
        pass &= (ratio - want).abs() <= 0.05 && dom_hw && dom_sw;
        parts.push(format!("{id}={ratio:.3} (want {want}) joint>=hw:{dom_hw} joint>=sw:{dom_sw}"));
    }
    outcome(pass, parts.join("; "))
}

fn noisy_dataset(sigma: f64, seed: u64) -> Vec<pals::profiler::ProfilingRecord> {
    let reg = registry();
    let mut backend = SimulatedBackend::new(reg.clone());
    let opts = SweepOptions {
        noise_seed: seed,
        noise_sigma: sigma,
        ..SweepOptions::default()
    };
    let mut all = Vec::new();
    for id in reg.ids() {
        let ds = run_sweep(&SweepGrid::default(), id, &mut backend, &opts).unwrap();
        all.extend(ds.records);
    }
    all
}

fn c6_predictor() -> Outcome {
    let data = noisy_dataset(0.02, 11);
    let (train, held) = split_holdout(&data, 0.2, 5).unwrap();
    let hyper = Hyperparams::default();
    let p = Predictor::train(&train, &hyper, 17, SystemPowerCoeffs::default()).unwrap();
    let mape = p.evaluate_mape(&held).unwrap();
    let imp = efficiency_importance(&train, &hyper, 17).unwrap();
    let top = imp[0].0.clone();
    let pass = mape.throughput <= 0.07 && mape.power <= 0.05 && top == "batch_size";
    outcome(
        pass,
        format!(
            "pooled held-out MAPE throughput={:.2}% (<=7) power={:.2}% (<=5) on {} records; efficiency importance #1 = {top} ({:.3})",
            mape.throughput * 100.0,
            mape.power * 100.0,
            held.len(),
            imp[0].1
        ),
    )
}

fn c7_single_node() -> Outcome {
    let sc = Scenario::load(&scenario_path("single-node.json")).unwrap();
    let reg = registry();
    let predictor = sim::prepare_predictor(&sc, &reg).unwrap();
    let e = |p: Policy| {
        sim::run_with(&sc, &reg, p, Some(&predictor))
            .unwrap()
            .summary
            .cluster
            .tokens_per_joule
    };
    let base = e(Policy::Fixed);
    let pals = e(Policy::Pals);
    let oracle = e(Policy::Oracle);
    let gap = (pals - base) / (oracle - base);
    let ratio = pals / base;
    outcome(
        gap >= 0.90 && ratio >= 1.20,
        format!("oracle-gap capture={gap:.3} (>=0.90) pals/fixed={ratio:.3} (>=1.20); tokens/J fixed={base:.4} pals={pals:.4} oracle={oracle:.4}"),
    )
}

fn c8_multi_node_qos() -> Outcome {
    let sc = Scenario::load(&scenario_path("multi-node-4800w.json")).unwrap();
    let reg = registry();
    let predictor = sim::prepare_predictor(&sc, &reg).unwrap();
    let base = sim::run_with(&sc, &reg, Policy::Fixed, Some(&predictor)).unwrap().summary;
    let pals = sim::run_with(&sc, &reg, Policy::Pals, Some(&predictor)).unwrap().summary;
    let mut pass = true;
    let mut parts = Vec::new();
    for (b, p) in base.nodes.iter().zip(&pals.nodes) {
        let (vb, vp) = (b.metrics.qos_violation_rate, p.metrics.qos_violation_rate);
        pass &= vp <= vb / 4.0;
        parts.push(format!("{} {:.4}->{:.4}", b.model, vb, vp));
    }
    let ratio = pals.cluster.tokens_per_joule / base.cluster.tokens_per_joule;
    pass &= ratio >= 1.10;
    outcome(
        pass,
        format!("violation fixed->pals [{}] (pals <= fixed/4); efficiency pals/fixed={ratio:.3} (>=1.10)", parts.join(", ")),
    )
}

fn c9_demand_response() -> Outcome {
    let sc = Scenario::load(&scenario_path("demand-response.json")).unwrap();
    let reg = registry();
    let predictor = sim::prepare_predictor(&sc, &reg).unwrap();
    let pals = sim::run_with(&sc, &reg, Policy::Pals, Some(&predictor)).unwrap().summary;
    let stat = sim::run_with(&sc, &reg, Policy::AdaptiveCap, Some(&predictor)).unwrap().summary;
    let range = pals.budget_dynamic_range.unwrap();
    let mae = pals.cluster.power_tracking_mae.unwrap();
    let ratio = pals.low_budget_quartile_throughput.unwrap() / stat.low_budget_quartile_throughput.unwrap();
    outcome(
        mae <= 0.05 * range && ratio >= 1.15,
        format!(
            "tracking MAE={mae:.1} W (<= {:.1} W = 5% of {range:.0} W range); low-quartile throughput pals/static-batch={ratio:.3} (>=1.15)",
            0.05 * range
        ),
    )
}

/// Predicted throughput linear in cap, efficiency falling with cap.
fn linear_stub(p: &OperatingPoint) -> pals::Result<PredictedMetrics> {
    let t = 100.0 + p.power_cap;
    let sys = p.power_cap * p.power_cap / 10.0 + 500.0;
    Ok(PredictedMetrics {
        throughput_hat: t,
        power_hat: (sys - 345.0) / 4.2,
        system_power_hat: sys,
        efficiency_hat: t / sys,
    })
}

fn telemetry(t: f64, point: &OperatingPoint, throughput: f64, gpu_power: f64) -> TelemetrySample {
    TelemetrySample {
        t,
        per_gpu_power: vec![gpu_power; 4],
        throughput,
        utilization: 1.0,
        queue_depth: 10,
        active_batch: point.batch_size,
        power_cap: point.power_cap,
        batch_cap: point.batch_size,
    }
}

/// Intervals until |e| <= eps holds for good, under true = lambda * predicted.
fn settle_intervals(lambda: f64) -> Option<usize> {
    let cfg = ControllerConfig::default();
    let coeffs = SystemPowerCoeffs::default();
    let caps: Vec<f64> = (100..=400).map(f64::from).collect();
    let cands = candidate_grid(&caps, &[64], 1, 1, 1);
    let pred = FnPredictor(linear_stub);
    let targets = Targets::new(300.0, None, cfg.epsilon).unwrap();
    let mut state = ControllerState::new(OperatingPoint::new(400.0, 64, 1, 1, 1));
    let mut errs = Vec::new();
    for k in 0..60 {
        let cur = state.current_point;
        let m = linear_stub(&cur).unwrap();
        let sample = telemetry((k + 1) as f64 * 0.5, &cur, lambda * m.throughput_hat, m.power_hat);
        errs.push(targets.normalized_error(sample.throughput).abs());
        let (_, next) = control_step(&sample, &targets, &cands, &pred, &state, &cfg, &coeffs).unwrap();
        state = next;
    }
    (0..errs.len()).find(|&k| errs[k..].iter().all(|e| *e <= cfg.epsilon)).map(|k| k + 1)
}

fn c10_controller_properties() -> Outcome {
    let s07 = settle_intervals(0.7);
    let s13 = settle_intervals(1.3);
    let conv = s07.is_some_and(|k| k <= 20) && s13.is_some_and(|k| k <= 20);

    let mut runner = TestRunner::new(PtConfig {
        cases: 1000,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let hyst = runner
        .run(
            &(proptest::collection::vec(-1.0f64..1.0, 1..40), 0.01f64..0.2, 0.6f64..1.6),
            |(noise, eps, lambda)| {
                let cfg = ControllerConfig {
                    epsilon: eps,
                    ..ControllerConfig::default()
                };
                let coeffs = SystemPowerCoeffs::default();
                let cands = candidate_grid(&[100.0, 200.0, 300.0, 400.0], &[8, 64], 1, 1, 1);
                let pred = FnPredictor(linear_stub);
                let targets = Targets::new(300.0, None, eps).unwrap();
                let mut state = ControllerState::new(OperatingPoint::new(300.0, 64, 1, 1, 1));
                // First call establishes the targets.
                let cur = state.current_point;
                let first = telemetry(0.5, &cur, 300.0, 200.0);
                state = control_step(&first, &targets, &cands, &pred, &state, &cfg, &coeffs).unwrap().1;
                for (k, n) in noise.iter().enumerate() {
                    let cur = state.current_point;
                    let thr = 300.0 * (1.0 - n * eps);
                    let gpu = linear_stub(&cur).unwrap().power_hat * lambda;
                    let sample = telemetry(1.0 + k as f64 * 0.5, &cur, thr, gpu);
                    let (d, next) = control_step(&sample, &targets, &cands, &pred, &state, &cfg, &coeffs).unwrap();
                    prop_assert!(!d.applied);
                    state = next;
                }
                Ok(())
            },
        )
        .is_ok();

    let mut runner = TestRunner::new(PtConfig {
        cases: 1000,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let invariance = runner
        .run(
            &(
                proptest::collection::vec((1.0f64..1000.0, 100.0f64..5000.0), 1..30),
                0.0f64..1.5,
                proptest::option::of(0.3f64..1.2),
                1e-3f64..1e3,
                proptest::bool::ANY,
            ),
            |(vals, tfrac, bfrac, scale, bind)| {
                let pts: Vec<OperatingPoint> = (0..vals.len())
                    .map(|i| OperatingPoint::new(100.0 + (i % 13) as f64 * 25.0, 1 + (i / 13) as u32, 1, 1, 1))
                    .collect();
                let table = |s: f64| {
                    TablePredictor::new(
                        pts.iter()
                            .zip(&vals)
                            .map(|(p, (t, w))| {
                                (
                                    *p,
                                    PredictedMetrics {
                                        throughput_hat: t * s,
                                        power_hat: w * s / 4.2,
                                        system_power_hat: w * s,
                                        efficiency_hat: t / w,
                                    },
                                )
                            })
                            .collect(),
                    )
                };
                let tmax = vals.iter().map(|v| v.0).fold(0.0, f64::max);
                let wmax = vals.iter().map(|v| v.1).fold(0.0, f64::max);
                // Either the constraints scale with the predictions, or they
                // are slack (target below every prediction, no budget).
                let (target, budget, k) = if bind {
                    (tfrac * tmax, bfrac.map(|b| b * wmax), scale)
                } else {
                    (1e-9, None, 1.0)
                };
                let t1 = Targets::new(target, budget, 0.05).unwrap();
                let t2 = Targets::new(target * k, budget.map(|b| b * k), 0.05).unwrap();
                let a = select_with_bias(&pts, &t1, &table(1.0), 1.0, 1.0).unwrap();
                let b = select_with_bias(&pts, &t2, &table(scale), 1.0, 1.0).unwrap();
                prop_assert_eq!(a.0, b.0);
                Ok(())
            },
        )
        .is_ok();

    outcome(
        conv && hyst && invariance,
        format!(
            "bias settles in {s07:?} (lambda 0.7) / {s13:?} (lambda 1.3) intervals (<=20); no reconfiguration with |e|<=eps over 1000 cases: {hyst}; argmax invariance over 1000 cases: {invariance}"
        ),
    )
}

fn sha(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn pipeline_hashes(dir: &Path) -> Vec<String> {
    let reg = registry();
    let mut backend = SimulatedBackend::new(reg.clone());
    let ds = run_sweep(&SweepGrid::default(), "qwen1.5-moe", &mut backend, &SweepOptions::default()).unwrap();
    let csv = dir.join("dataset.csv");
    write_records_csv(&ds.records, std::fs::File::create(&csv).unwrap()).unwrap();
    let hyper = Hyperparams {
        n_trees: 20,
        ..Hyperparams::default()
    };
    let p = Predictor::train(&ds.records, &hyper, 3, SystemPowerCoeffs::default()).unwrap();
    let model_file = dir.join("model.json");
    p.save(&model_file).unwrap();
    let mut sc = Scenario::load(&scenario_path("single-node.json")).unwrap();
    sc.duration = 60.0;
    let res = sim::run_with(&sc, &reg, Policy::Pals, Some(&p)).unwrap();
    let out = dir.join("run");
    let files = res.write_dir(&out).unwrap();
    let mut hashes = vec![sha(&csv), sha(&model_file)];
    hashes.extend(files.iter().map(|f| sha(&out.join(f))));
    hashes
}

fn c11_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ha = pipeline_hashes(a.path());
    let hb = pipeline_hashes(b.path());
    outcome(
        ha == hb,
        format!("dataset, model and 4 log files hash-identical across two runs: {}", ha == hb),
    )
}

fn c12_sim_fidelity() -> Outcome {
    let mut sc = Scenario::load(&scenario_path("single-node.json")).unwrap();
    sc.duration = 300.0;
    sc.nodes[0].load = Some(3.0);
    let reg = registry();
    let res = sim::run_with(&sc, &reg, Policy::Fixed, None).unwrap();
    let m = model(&sc.nodes[0].model);
    let analytic = m.throughput(&m.point(400.0, 64)).unwrap();
    let measured = res.summary.cluster.mean_throughput;
    let err = (measured - analytic).abs() / analytic;
    outcome(
        err <= 0.03,
        format!("saturated fixed (400 W, b64) throughput {measured:.2} vs analytic {analytic:.2} tokens/s: rel. error {:.3}% (<=3%)", err * 100.0),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("batch amortization", c1_batch_amortization),
        ("power-cap peak", c2_power_cap_peak),
        ("marginal batch gain 32->64", c3_marginal_batch),
        ("multi-node EP scaling", c4_multi_node),
        ("frontier expansion", c5_frontier),
        ("predictor accuracy", c6_predictor),
        ("single-node oracle gap", c7_single_node),
        ("multi-node QoS under 4800 W", c8_multi_node_qos),
        ("demand response", c9_demand_response),
        ("controller properties", c10_controller_properties),
        ("determinism", c11_determinism),
        ("simulator fidelity", c12_sim_fidelity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let tag = format!("criterion {:>2}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|s| name.contains(s.as_str()) || tag.ends_with(s.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("{tag} [{verdict}] {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

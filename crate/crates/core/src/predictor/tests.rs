use std::time::Instant;

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::profiler::{run_sweep, split_holdout, SimulatedBackend, SweepGrid, SweepOptions};

fn record(model: &str, cap: f64, batch: u32, thr: f64, power: f64) -> ProfilingRecord {
    ProfilingRecord {
        model: model.into(),
        power_cap: cap,
        batch_size: batch,
        tp: 1,
        ep: 1,
        dp: 1,
        measured_throughput: thr,
        measured_gpu_power: power,
        measured_sys_power: 4.2 * power + 345.0,
        duration: 60.0,
    }
}

fn sweep(models: &[&str], sigma: f64) -> Vec<ProfilingRecord> {
    let reg = crate::ProfileRegistry::builtin();
    let mut backend = SimulatedBackend::new(reg);
    let opts = SweepOptions {
        noise_sigma: sigma,
        noise_seed: 4,
        ..SweepOptions::default()
    };
    models
        .iter()
        .flat_map(|m| run_sweep(&SweepGrid::default(), m, &mut backend, &opts).unwrap().records)
        .collect()
}

fn small() -> Hyperparams {
    Hyperparams {
        n_trees: 20,
        ..Hyperparams::default()
    }
}

#[test]
fn constant_target_predicts_the_constant() {
    let rows: Vec<_> = (0..30).map(|i| record("m", 100.0 + 10.0 * i as f64, 1 + i, 50.0, 50.0)).collect();
    let p = Predictor::train(&rows, &Hyperparams::default(), 1, SystemPowerCoeffs::default()).unwrap();
    for t in &p.throughput.trees {
        assert_eq!(t.leaf_count(), 1);
    }
    for probe in [(120.0, 3), (400.0, 64), (100.0, 1)] {
        let m = p.predict_for("m", &OperatingPoint::new(probe.0, probe.1, 1, 1, 1)).unwrap();
        assert_relative_eq!(m.throughput_hat, 50.0, max_relative = 1e-12);
        assert_relative_eq!(m.power_hat, 50.0, max_relative = 1e-12);
    }
}

#[test]
fn empty_training_set_is_an_error() {
    assert!(Predictor::train(&[], &Hyperparams::default(), 1, SystemPowerCoeffs::default()).is_err());
    assert!(EnsembleModel::fit(&[], &[], &Hyperparams::default(), 1).is_err());
}

#[test]
fn log_target_rejects_non_positive_labels() {
    let x = vec![vec![1.0], vec![2.0]];
    assert!(EnsembleModel::fit(&x, &[1.0, 0.0], &Hyperparams::default(), 1).is_err());
    let linear = Hyperparams {
        log_target: false,
        ..Hyperparams::default()
    };
    assert!(EnsembleModel::fit(&x, &[1.0, 0.0], &linear, 1).is_ok());
}

#[test]
fn same_seed_same_model() {
    let data = sweep(&["olmoe-1b-7b"], 0.02);
    let a = Predictor::train(&data, &small(), 7, SystemPowerCoeffs::default()).unwrap();
    let b = Predictor::train(&data, &small(), 7, SystemPowerCoeffs::default()).unwrap();
    assert_eq!(a, b);
    let c = Predictor::train(&data, &small(), 8, SystemPowerCoeffs::default()).unwrap();
    assert_ne!(a.throughput, c.throughput);
}

#[test]
fn training_ignores_row_order() {
    let data = sweep(&["olmoe-1b-7b", "gpt2"], 0.02);
    let mut shuffled = data.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let a = Predictor::train(&data, &small(), 5, SystemPowerCoeffs::default()).unwrap();
    let b = Predictor::train(&shuffled, &small(), 5, SystemPowerCoeffs::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn noiseless_grid_interpolates_within_three_percent() {
    let data = sweep(&crate::perf::BUILTIN_PROFILE_IDS, 0.0);
    let (train, held) = split_holdout(&data, 0.2, 1).unwrap();
    let p = Predictor::train(&train, &Hyperparams::default(), 2, SystemPowerCoeffs::default()).unwrap();
    let m = p.evaluate_mape(&held).unwrap();
    assert!(m.throughput <= 0.03 && m.power <= 0.03, "{m:?}");

    // Monotone spot-check on every model.
    for id in crate::perf::BUILTIN_PROFILE_IDS {
        let dep = crate::ProfileRegistry::builtin().get(id).unwrap().deployment;
        let hi = p.predict_for(id, &OperatingPoint::deployed(400.0, 64, dep)).unwrap();
        let lo = p.predict_for(id, &OperatingPoint::deployed(150.0, 1, dep)).unwrap();
        assert!(hi.throughput_hat >= lo.throughput_hat, "{id}");
    }
    let per_model = p.per_model_mape(&held).unwrap();
    assert_eq!(per_model.len(), crate::perf::BUILTIN_PROFILE_IDS.len());
}

#[test]
fn single_tree_predicts_its_leaf() {
    let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
    let y: Vec<f64> = (0..20).map(|i| if i < 10 { 2.0 } else { 8.0 }).collect();
    let hyper = Hyperparams {
        n_trees: 1,
        bootstrap: false,
        log_target: false,
        ..Hyperparams::default()
    };
    let m = EnsembleModel::fit(&x, &y, &hyper, 0).unwrap();
    for probe in [0.0, 4.2, 9.0, 15.0] {
        assert_eq!(m.predict(&[probe]), m.trees[0].predict(&[probe]));
    }
    assert_eq!(m.predict(&[3.0]), 2.0);
    assert_eq!(m.predict(&[12.0]), 8.0);
}

#[test]
fn deep_ensemble_memorizes_training_points() {
    let data = sweep(&["mixtral-8x7b"], 0.02);
    let hyper = Hyperparams {
        n_trees: 30,
        max_depth: 30,
        min_leaf: 1,
        bootstrap: false,
        ..Hyperparams::default()
    };
    let p = Predictor::train(&data, &hyper, 1, SystemPowerCoeffs::default()).unwrap();
    for r in data.iter().step_by(17) {
        let m = p.predict_for(&r.model, &r.point()).unwrap();
        assert!((m.throughput_hat / r.measured_throughput - 1.0).abs() <= 0.02);
        assert!((m.power_hat / r.measured_gpu_power - 1.0).abs() <= 0.02);
    }
}

#[test]
fn mape_examples() {
    assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    let truth = [10.0, 20.0, 400.0];
    let pred: Vec<f64> = truth.iter().map(|t| t * 1.1).collect();
    assert_relative_eq!(mape(&pred, &truth).unwrap(), 0.10, max_relative = 1e-12);
    assert!(mape(&[], &[]).is_err());
    assert!(mape(&[1.0], &[0.0]).is_err());
}

#[test]
fn importance_is_normalized_and_zero_for_unused_features() {
    let data = sweep(&["qwen1.5-moe"], 0.02);
    let p = Predictor::train(&data, &small(), 3, SystemPowerCoeffs::default()).unwrap();
    let imp = p.feature_importance(Target::Throughput).unwrap();
    assert_relative_eq!(imp.iter().map(|x| x.1).sum::<f64>(), 1.0, max_relative = 1e-12);
    // A single model: the one-hot column never splits.
    let onehot = imp.iter().find(|x| x.0 == "model=qwen1.5-moe").unwrap();
    assert_eq!(onehot.1, 0.0);
    assert!(p.feature_importance(Target::Efficiency).is_err());
    let eff = efficiency_importance(&data, &small(), 3).unwrap();
    assert_relative_eq!(eff.iter().map(|x| x.1).sum::<f64>(), 1.0, max_relative = 1e-12);
}

#[test]
fn unknown_model_is_rejected() {
    let data = sweep(&["gpt2"], 0.0);
    let p = Predictor::train(&data, &small(), 3, SystemPowerCoeffs::default()).unwrap();
    let pt = OperatingPoint::new(300.0, 8, 1, 1, 1);
    assert!(matches!(p.predict_for("llama2-7b", &pt), Err(Error::UnknownProfile(_))));
    assert!(p.bind("llama2-7b").is_err());
    let bound = p.bind("gpt2").unwrap();
    assert_eq!(bound.predict_point(&pt).unwrap(), p.predict_for("gpt2", &pt).unwrap());
}

#[test]
fn save_load_round_trip_and_version_check() {
    let data = sweep(&["gpt2"], 0.02);
    let p = Predictor::train(&data, &small(), 3, SystemPowerCoeffs::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    p.save(&path).unwrap();
    assert_eq!(Predictor::load(&path).unwrap(), p);

    let mut old = p.clone();
    old.format_version = MODEL_FORMAT_VERSION + 1;
    old.save(&path).unwrap();
    assert!(Predictor::load(&path).is_err());
}

#[test]
fn efficiency_hat_uses_system_power() {
    let m = PredictedMetrics::from_parts(120.0, 250.0, 2, &SystemPowerCoeffs::default());
    assert_relative_eq!(m.system_power_hat, 2.0 * (1.05 * 4.0 * 250.0 + 345.0));
    assert_relative_eq!(m.efficiency_hat, 120.0 / m.system_power_hat);
}

#[test]
fn scores_ten_thousand_candidates_per_second() {
    let data = sweep(&crate::perf::BUILTIN_PROFILE_IDS[..3], 0.02);
    let p = Predictor::train(&data, &Hyperparams::default(), 1, SystemPowerCoeffs::default()).unwrap();
    let bound = p.bind("mixtral-8x7b").unwrap();
    let start = Instant::now();
    let mut sink = 0.0;
    for i in 0..20_000u32 {
        let pt = OperatingPoint::new(100.0 + (i % 301) as f64, 1 + i % 64, 2, 4, 1);
        sink += bound.predict_point(&pt).unwrap().efficiency_hat;
    }
    assert!(sink > 0.0);
    assert!(start.elapsed().as_secs_f64() < 2.0, "{:?}", start.elapsed());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predictions_stay_within_training_range(
        ys in proptest::collection::vec(1.0f64..1000.0, 4..40),
        probe in (0.0f64..500.0, 0u32..100),
        seed in 0u64..1000,
        log_target in proptest::bool::ANY,
    ) {
        let x: Vec<Vec<f64>> = (0..ys.len()).map(|i| vec![(i * 13 % 50) as f64 * 10.0, (i % 7) as f64]).collect();
        let hyper = Hyperparams { n_trees: 10, log_target, ..Hyperparams::default() };
        let m = EnsembleModel::fit(&x, &ys, &hyper, seed).unwrap();
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = m.predict(&[probe.0, probe.1 as f64]);
        prop_assert!(v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn shuffling_rows_does_not_change_the_model(seed in 0u64..50, shuffle_seed in 0u64..1000) {
        let rows: Vec<_> = (0..24)
            .map(|i| record(if i % 2 == 0 { "a" } else { "b" }, 100.0 + 12.5 * i as f64, 1 + (i % 5), 10.0 + (i * i) as f64, 100.0 + i as f64))
            .collect();
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let hyper = Hyperparams { n_trees: 5, ..Hyperparams::default() };
        let a = Predictor::train(&rows, &hyper, seed, SystemPowerCoeffs::default()).unwrap();
        let b = Predictor::train(&shuffled, &hyper, seed, SystemPowerCoeffs::default()).unwrap();
        prop_assert_eq!(a, b);
    }
}

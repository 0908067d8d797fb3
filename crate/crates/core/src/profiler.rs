//! Offline sweep over the knob grid, producing the training set for the
//! predictor.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perf::{evaluate, ProfileRegistry};
use crate::{OperatingPoint, SystemPowerCoeffs};

/// Cartesian knob grid to sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub caps: Vec<f64>,
    pub batches: Vec<u32>,
    pub tps: Vec<u32>,
    pub eps: Vec<u32>,
    pub dps: Vec<u32>,
}

impl Default for SweepGrid {
    /// The standard profiling grid: 6 caps, 6 batches and 3 values for each
    /// parallelism knob.
    fn default() -> Self {
        SweepGrid {
            caps: vec![150.0, 200.0, 250.0, 300.0, 350.0, 400.0],
            batches: vec![1, 4, 8, 16, 32, 64],
            tps: vec![1, 2, 4],
            eps: vec![1, 4, 8],
            dps: vec![1, 2, 3],
        }
    }
}

impl SweepGrid {
    pub fn single(point: OperatingPoint) -> Self {
        SweepGrid {
            caps: vec![point.power_cap],
            batches: vec![point.batch_size],
            tps: vec![point.tp],
            eps: vec![point.ep],
            dps: vec![point.dp],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.caps.is_empty()
            || self.batches.is_empty()
            || self.tps.is_empty()
            || self.eps.is_empty()
            || self.dps.is_empty()
        {
            return Err(Error::Config("sweep grid lists must be non-empty".into()));
        }
        Ok(())
    }

    pub fn cardinality(&self) -> usize {
        self.caps.len() * self.batches.len() * self.tps.len() * self.eps.len() * self.dps.len()
    }

    /// Points in canonical order: cap, batch, tp, ep, dp (dp fastest).
    pub fn points(&self) -> Vec<OperatingPoint> {
        let mut out = Vec::with_capacity(self.cardinality());
        for &cap in &self.caps {
            for &batch in &self.batches {
                for &tp in &self.tps {
                    for &ep in &self.eps {
                        for &dp in &self.dps {
                            out.push(OperatingPoint::new(cap, batch, tp, ep, dp));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilingRecord {
    pub model: String,
    pub power_cap: f64,
    pub batch_size: u32,
    pub tp: u32,
    pub ep: u32,
    pub dp: u32,
    pub measured_throughput: f64,
    /// Mean per-GPU power.
    pub measured_gpu_power: f64,
    pub measured_sys_power: f64,
    pub duration: f64,
}

impl ProfilingRecord {
    pub fn point(&self) -> OperatingPoint {
        OperatingPoint::new(self.power_cap, self.batch_size, self.tp, self.ep, self.dp)
    }

    /// Tokens per joule of system energy.
    pub fn efficiency(&self) -> f64 {
        self.measured_throughput / self.measured_sys_power
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub point: OperatingPoint,
    pub reason: String,
}

/// Sweep metadata persisted next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub model: String,
    pub grid: SweepGrid,
    pub seed: u64,
    pub noise_sigma: f64,
    pub window: f64,
    pub complete: bool,
    pub skipped: Vec<SkippedPoint>,
    /// Noise draws truncated at the 5-sigma guard.
    pub outliers_clamped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<ProfilingRecord>,
    pub meta: SweepMeta,
}

/// Noiseless measurement returned by a backend.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub throughput: f64,
    pub gpu_power: f64,
    pub sys_power: f64,
}

/// Something that can run one configuration and report what it saw.
pub trait ProfilingBackend {
    /// `Ok(None)` marks a configuration the model cannot realize.
    fn measure(&mut self, model: &str, point: &OperatingPoint) -> Result<Option<Measurement>>;
}

/// Backend that answers from the analytic model.
#[derive(Clone, Debug)]
pub struct SimulatedBackend {
    pub registry: ProfileRegistry,
    pub coeffs: SystemPowerCoeffs,
}

impl SimulatedBackend {
    pub fn new(registry: ProfileRegistry) -> Self {
        SimulatedBackend {
            registry,
            coeffs: SystemPowerCoeffs::default(),
        }
    }
}

impl ProfilingBackend for SimulatedBackend {
    fn measure(&mut self, model: &str, point: &OperatingPoint) -> Result<Option<Measurement>> {
        let profile = self.registry.get(model)?;
        if profile.check_point(point).is_err() || self.registry.gpu.check_cap(point.power_cap).is_err() {
            return Ok(None);
        }
        let e = evaluate(point, profile, &self.registry.gpu, &self.coeffs)?;
        Ok(Some(Measurement {
            throughput: e.throughput,
            gpu_power: e.gpu_power,
            sys_power: e.system_power,
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub noise_seed: u64,
    /// Relative standard deviation of the multiplicative measurement noise.
    pub noise_sigma: f64,
    /// Simulated measurement window per point, seconds.
    pub window: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            noise_seed: 0,
            noise_sigma: 0.02,
            window: 60.0,
        }
    }
}

const NOISE_GUARD_SIGMAS: f64 = 5.0;

fn point_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Sweeps `grid` for `model`. Infeasible points are skipped and recorded; a
/// backend error stops the sweep and yields a partial dataset flagged
/// incomplete.
///
/// Each point draws its noise from its own RNG stream keyed by grid index, so
/// the result does not depend on evaluation order.
pub fn run_sweep(
    grid: &SweepGrid,
    model: &str,
    backend: &mut dyn ProfilingBackend,
    options: &SweepOptions,
) -> Result<Dataset> {
    grid.validate()?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut complete = true;
    let mut outliers = 0;
    for (index, point) in grid.points().into_iter().enumerate() {
        let m = match backend.measure(model, &point) {
            Ok(Some(m)) => m,
            Ok(None) => {
                skipped.push(SkippedPoint {
                    point,
                    reason: format!("configuration not realizable by {model}"),
                });
                continue;
            }
            Err(Error::UnknownProfile(id)) => return Err(Error::UnknownProfile(id)),
            Err(_) => {
                complete = false;
                break;
            }
        };
        let mut rng = point_rng(options.noise_seed, index);
        let mut noisy = |v: f64| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if z.abs() > NOISE_GUARD_SIGMAS {
                outliers += 1;
            }
            v * (1.0 + options.noise_sigma * z.clamp(-NOISE_GUARD_SIGMAS, NOISE_GUARD_SIGMAS))
        };
        records.push(ProfilingRecord {
            model: model.to_string(),
            power_cap: point.power_cap,
            batch_size: point.batch_size,
            tp: point.tp,
            ep: point.ep,
            dp: point.dp,
            measured_throughput: noisy(m.throughput),
            measured_gpu_power: noisy(m.gpu_power),
            measured_sys_power: noisy(m.sys_power),
            duration: options.window,
        });
    }
    Ok(Dataset {
        records,
        meta: SweepMeta {
            model: model.to_string(),
            grid: grid.clone(),
            seed: options.noise_seed,
            noise_sigma: options.noise_sigma,
            window: options.window,
            complete,
            skipped,
            outliers_clamped: outliers,
        },
    })
}

/// Splits `records` into (train, heldout), stratified by model.
///
/// Each model's rows are shuffled with a seeded RNG and the first
/// `round(fraction * n)` go to the holdout; both halves keep input order.
pub fn split_holdout(
    records: &[ProfilingRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<ProfilingRecord>, Vec<ProfilingRecord>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("holdout fraction {fraction} must lie in (0, 1)")));
    }
    let mut by_model: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_model.entry(r.model.as_str()).or_default().push(i);
    }
    let mut held = vec![false; records.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in by_model.values_mut() {
        idx.shuffle(&mut rng);
        let n_hold = (fraction * idx.len() as f64).round() as usize;
        for &i in idx.iter().take(n_hold) {
            held[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (r, h) in records.iter().zip(held) {
        if h {
            heldout.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, heldout))
}

/// Writes records as CSV with the fixed header.
pub fn write_records_csv<W: Write>(records: &[ProfilingRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<ProfilingRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let r: ProfilingRecord = row?;
        if !(r.measured_throughput > 0.0 && r.measured_gpu_power > 0.0 && r.measured_sys_power > 0.0) {
            return Err(Error::Data(format!(
                "non-positive measurement for {} at cap {} batch {}",
                r.model, r.power_cap, r.batch_size
            )));
        }
        out.push(r);
    }
    Ok(out)
}

/// Column order of the dataset CSV.
pub const CSV_HEADER: &str =
    "model,power_cap,batch_size,tp,ep,dp,measured_throughput,measured_gpu_power,measured_sys_power,duration";

#[cfg(test)]
mod tests {
    use super::*;

    fn backend() -> SimulatedBackend {
        SimulatedBackend::new(ProfileRegistry::builtin())
    }

    #[test]
    fn full_grid_has_972_candidates_all_feasible_for_moe() {
        let grid = SweepGrid::default();
        assert_eq!(grid.cardinality(), 6 * 6 * 3 * 3 * 3);
        assert_eq!(grid.cardinality(), 972);
        let ds = run_sweep(&grid, "qwen1.5-moe", &mut backend(), &SweepOptions::default()).unwrap();
        assert_eq!(ds.records.len(), 972);
        assert!(ds.meta.complete);
        assert!(ds.meta.skipped.is_empty());
    }

    #[test]
    fn single_point_grid_gives_one_record() {
        let grid = SweepGrid::single(OperatingPoint::new(300.0, 16, 2, 4, 1));
        let ds = run_sweep(&grid, "mixtral-8x7b", &mut backend(), &SweepOptions::default()).unwrap();
        assert_eq!(ds.records.len(), 1);
        assert_eq!(ds.records[0].point(), OperatingPoint::new(300.0, 16, 2, 4, 1));
    }

    #[test]
    fn dense_model_skips_expert_parallel_points() {
        let grid = SweepGrid::default();
        let ds = run_sweep(&grid, "llama2-7b", &mut backend(), &SweepOptions::default()).unwrap();
        assert_eq!(ds.records.len(), 972 / 3);
        assert_eq!(ds.meta.skipped.len(), 972 * 2 / 3);
        assert!(ds.records.iter().all(|r| r.ep == 1));
        assert!(ds.meta.skipped.iter().all(|s| s.point.ep > 1));
    }

    #[test]
    fn expert_count_bounds_ep() {
        let grid = SweepGrid {
            eps: vec![1, 8, 16],
            ..SweepGrid::single(OperatingPoint::new(300.0, 8, 2, 1, 1))
        };
        let ds = run_sweep(&grid, "mixtral-8x7b", &mut backend(), &SweepOptions::default()).unwrap();
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.meta.skipped[0].point.ep, 16);
    }

    #[test]
    fn unknown_model_is_an_error() {
        let err = run_sweep(&SweepGrid::default(), "gpt-5", &mut backend(), &SweepOptions::default()).unwrap_err();
        assert!(matches!(err, Error::UnknownProfile(_)));
    }

    struct FlakyBackend {
        inner: SimulatedBackend,
        remaining: usize,
    }

    impl ProfilingBackend for FlakyBackend {
        fn measure(&mut self, model: &str, point: &OperatingPoint) -> Result<Option<Measurement>> {
            if self.remaining == 0 {
                return Err(Error::Backend("lost connection".into()));
            }
            self.remaining -= 1;
            self.inner.measure(model, point)
        }
    }

    #[test]
    fn backend_failure_yields_partial_dataset() {
        let mut b = FlakyBackend {
            inner: backend(),
            remaining: 10,
        };
        let ds = run_sweep(&SweepGrid::default(), "qwen1.5-moe", &mut b, &SweepOptions::default()).unwrap();
        assert_eq!(ds.records.len(), 10);
        assert!(!ds.meta.complete);
    }

    #[test]
    fn noise_stays_within_guard() {
        let noiseless = run_sweep(
            &SweepGrid::default(),
            "olmoe-1b-7b",
            &mut backend(),
            &SweepOptions {
                noise_sigma: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let noisy = run_sweep(&SweepGrid::default(), "olmoe-1b-7b", &mut backend(), &SweepOptions::default()).unwrap();
        for (a, b) in noiseless.records.iter().zip(&noisy.records) {
            for (x, y) in [
                (a.measured_throughput, b.measured_throughput),
                (a.measured_gpu_power, b.measured_gpu_power),
                (a.measured_sys_power, b.measured_sys_power),
            ] {
                assert!((y / x - 1.0).abs() <= 0.10 + 1e-12);
            }
        }
    }

    fn records(n: usize) -> Vec<ProfilingRecord> {
        let ds = run_sweep(&SweepGrid::default(), "qwen1.5-moe", &mut backend(), &SweepOptions::default()).unwrap();
        ds.records.into_iter().take(n).collect()
    }

    #[test]
    fn holdout_split_sizes() {
        let rs = records(972);
        let (train, held) = split_holdout(&rs, 0.2, 3).unwrap();
        assert_eq!(held.len(), 194);
        assert_eq!(train.len(), 778);
        let two = records(2);
        let (a, b) = split_holdout(&two, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
    }

    #[test]
    fn holdout_split_is_deterministic_disjoint_and_exhaustive() {
        let rs = records(972);
        let first = split_holdout(&rs, 0.2, 11).unwrap();
        let second = split_holdout(&rs, 0.2, 11).unwrap();
        assert_eq!(first, second);
        let (train, held) = first;
        let key = |r: &ProfilingRecord| format!("{:?}", r.point());
        let mut all: Vec<String> = train.iter().chain(&held).map(key).collect();
        all.sort();
        let mut expected: Vec<String> = rs.iter().map(key).collect();
        expected.sort();
        assert_eq!(all, expected);
    }

    #[test]
    fn holdout_split_rejects_bad_fraction() {
        assert!(split_holdout(&records(4), 0.0, 1).is_err());
        assert!(split_holdout(&records(4), 1.0, 1).is_err());
    }

    #[test]
    fn holdout_split_is_stratified_by_model() {
        let mut rs = records(100);
        let other = run_sweep(&SweepGrid::default(), "olmoe-1b-7b", &mut backend(), &SweepOptions::default()).unwrap();
        rs.extend(other.records.into_iter().take(50));
        let (_, held) = split_holdout(&rs, 0.2, 5).unwrap();
        assert_eq!(held.iter().filter(|r| r.model == "qwen1.5-moe").count(), 20);
        assert_eq!(held.iter().filter(|r| r.model == "olmoe-1b-7b").count(), 10);
    }

    #[test]
    fn csv_header_and_round_trip() {
        let rs = records(5);
        let mut buf = Vec::new();
        write_records_csv(&rs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(read_records_csv(&buf[..]).unwrap(), rs);
    }
}

//! `pals`: profile, train, simulate, pareto and report.

mod manifest;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pals::analysis::{build_frontier, markdown_report, peak_efficiency, verify_dominance, FrontierPoint, Regime};
use pals::predictor::{efficiency_importance, Hyperparams, Predictor};
use pals::profiler::{read_records_csv, run_sweep, split_holdout, write_records_csv, SimulatedBackend, SweepGrid, SweepOptions};
use pals::sim::{self, Policy, Scenario, SimSummary, TraceSource};
use pals::{Error, ErrorClass, PerfModel, ProfileRegistry, SystemPowerCoeffs};
use serde::Serialize;

use manifest::{profile_versions, sha256_hex, RunManifest};

const DEFAULT_MODELS: &str = "mixtral-8x7b,qwen1.5-moe,olmoe-1b-7b";

#[derive(Parser)]
#[command(name = "pals", version, about = "Power-aware LLM serving toolkit")]
struct Cli {
    /// Root that relative --out paths are resolved against.
    #[arg(long, global = true, env = "PALS_OUT_ROOT", default_value = ".")]
    out_root: PathBuf,
    /// Directory of extra model profiles (*.json) layered over the built-in ones.
    #[arg(long, global = true)]
    profiles: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the knob grid for each model on the simulated backend.
    Profile(ProfileArgs),
    /// Train the throughput/power predictor and report held-out MAPE.
    Train(TrainArgs),
    /// Run a scenario through the cluster simulator.
    Simulate(SimulateArgs),
    /// Pareto frontiers of the knob regimes and pairwise dominance.
    Pareto(ParetoArgs),
    /// Markdown comparison of simulation results.
    Report(ReportArgs),
}

#[derive(Args, Serialize)]
struct ProfileArgs {
    /// Comma-separated model ids.
    #[arg(long, default_value = DEFAULT_MODELS, value_delimiter = ',')]
    models: Vec<String>,
    /// JSON sweep grid (caps, batches, tps, eps, dps); the standard grid otherwise.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 0.02)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seconds of simulated measurement per point.
    #[arg(long, default_value_t = 60.0)]
    window: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Dataset CSVs, or directories whose *.csv files are all read.
    #[arg(long, required = true, num_args = 1..)]
    dataset: Vec<PathBuf>,
    /// Fraction of each model's rows held out for the MAPE report.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 12)]
    max_depth: usize,
    #[arg(long, default_value_t = 2)]
    min_leaf: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario's policy.
    #[arg(long)]
    policy: Option<String>,
    /// Run every policy on the same arrivals, one subdirectory each.
    #[arg(long, conflicts_with = "policy")]
    suite: bool,
    /// Trained predictor to use instead of profiling in-process.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Overrides the scenario duration, seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ParetoArgs {
    #[arg(long)]
    model: String,
    /// Comma-separated regime presets.
    #[arg(long, default_value = "sw_only,hw_only,hw_sw,full_joint", value_delimiter = ',')]
    regimes: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// Result directories (with summary.json) or suite directories.
    #[arg(long, required = true, num_args = 1..)]
    results: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 config, 3 data, 4 runtime.
fn exit_code(e: &anyhow::Error) -> u8 {
    let class = e.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::class);
    let class = class.unwrap_or_else(|| {
        if e.chain().any(|c| c.is::<serde_json::Error>()) {
            ErrorClass::Data
        } else {
            ErrorClass::Runtime
        }
    });
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Runtime => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut registry = ProfileRegistry::builtin();
    if let Some(dir) = &cli.profiles {
        registry.load_dir(dir)?;
    }
    let out_dir = |p: &Path| -> Result<PathBuf> {
        let dir = if p.is_relative() { cli.out_root.join(p) } else { p.to_path_buf() };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    };
    match &cli.command {
        Command::Profile(a) => cmd_profile(a, &registry, &out_dir(&a.out)?),
        Command::Train(a) => cmd_train(a, &out_dir(&a.out)?),
        Command::Simulate(a) => cmd_simulate(a, &registry, &out_dir(&a.out)?),
        Command::Pareto(a) => cmd_pareto(a, &registry, &out_dir(&a.out)?),
        Command::Report(a) => cmd_report(a, &out_dir(&a.out)?),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_profile(a: &ProfileArgs, registry: &ProfileRegistry, out: &Path) -> Result<()> {
    let grid: SweepGrid = match &a.grid {
        Some(p) => read_json(p).map_err(|e| Error::Config(format!("{e:#}")))?,
        None => SweepGrid::default(),
    };
    grid.validate()?;
    for m in &a.models {
        registry.get(m)?;
    }
    let opts = SweepOptions {
        noise_seed: a.seed,
        noise_sigma: a.noise_sigma,
        window: a.window,
    };
    let mut backend = SimulatedBackend::new(registry.clone());
    let mut files = Vec::new();
    for m in &a.models {
        let ds = run_sweep(&grid, m, &mut backend, &opts)?;
        let csv = format!("{m}.csv");
        write_records_csv(&ds.records, File::create(out.join(&csv))?)?;
        let meta = format!("{m}.meta.json");
        write_json(&out.join(&meta), &ds.meta)?;
        println!("{m}: {} points, {} skipped", ds.records.len(), ds.meta.skipped.len());
        if !ds.meta.complete {
            eprintln!("warning: sweep of {m} stopped early; dataset is partial");
        }
        files.extend([csv, meta]);
    }
    let config = (&grid, &opts, &a.models);
    let mut manifest = RunManifest::new("profile", &config)?.seed("noise", a.seed);
    manifest.profile_versions = profile_versions(registry, a.models.iter().map(String::as_str))?;
    manifest.write(out, &files)
}

fn dataset_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            found.retain(|f| f.extension().is_some_and(|x| x == "csv"));
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct MapeReport {
    n_train: usize,
    n_heldout: usize,
    throughput_mape: f64,
    power_mape: f64,
    per_model: BTreeMap<String, pals::predictor::Mape>,
    efficiency_importance: Vec<(String, f64)>,
}

fn cmd_train(a: &TrainArgs, out: &Path) -> Result<()> {
    let files = dataset_files(&a.dataset)?;
    let mut records = Vec::new();
    let mut input_hashes = Vec::new();
    for f in &files {
        let bytes = std::fs::read(f).with_context(|| format!("reading {}", f.display()))?;
        input_hashes.push(sha256_hex(&bytes));
        records.extend(read_records_csv(bytes.as_slice()).with_context(|| format!("reading {}", f.display()))?);
    }
    if records.is_empty() {
        return Err(Error::Data("dataset is empty".into()).into());
    }
    let hyper = Hyperparams {
        n_trees: a.trees,
        max_depth: a.max_depth,
        min_leaf: a.min_leaf,
        ..Hyperparams::default()
    };
    let (train, heldout) = split_holdout(&records, a.holdout, a.split_seed)?;
    let predictor = Predictor::train(&train, &hyper, a.seed, SystemPowerCoeffs::default())?;
    let pooled = predictor.evaluate_mape(&heldout)?;
    let report = MapeReport {
        n_train: train.len(),
        n_heldout: heldout.len(),
        throughput_mape: pooled.throughput,
        power_mape: pooled.power,
        per_model: predictor.per_model_mape(&heldout)?,
        efficiency_importance: efficiency_importance(&train, &hyper, a.seed)?,
    };
    predictor.save(&out.join("model.json"))?;
    write_json(&out.join("mape.json"), &report)?;
    println!(
        "held-out MAPE: throughput {:.2}%, power {:.2}% ({} train / {} held out)",
        100.0 * pooled.throughput,
        100.0 * pooled.power,
        report.n_train,
        report.n_heldout
    );
    let config = (&hyper, a.holdout, &input_hashes);
    let manifest = RunManifest::new("train", &config)?
        .seed("split", a.split_seed)
        .seed("train", a.seed);
    manifest.write(out, &["model.json".into(), "mape.json".into()])
}

fn cmd_simulate(a: &SimulateArgs, registry: &ProfileRegistry, out: &Path) -> Result<()> {
    let mut sc = Scenario::load(&a.scenario)?;
    if let Some(d) = a.duration {
        sc.duration = d;
    }
    if let Some(p) = &a.policy {
        sc.policy = Policy::parse(p)?;
    }
    if let Some(m) = &a.model {
        sc.predictor.model_file = Some(std::path::absolute(m)?);
    }
    sc.validate()?;
    let trace_hash = match &sc.budget_trace {
        Some(TraceSource::File(f)) => Some(sha256_hex(&std::fs::read(sc.resolve(f))?)),
        _ => None,
    };
    let model_hash = match &sc.predictor.model_file {
        Some(f) => Some(sha256_hex(&std::fs::read(sc.resolve(f))?)),
        None => None,
    };
    let mut scenario_cfg = sc.clone();
    // Hash the predictor by content, not by where it lives.
    scenario_cfg.predictor.model_file = None;
    let config = (&scenario_cfg, a.suite, &trace_hash, &model_hash);
    let versions = profile_versions(registry, sc.nodes.iter().map(|n| n.model.as_str()))?;
    let manifest = |command: &str| -> Result<RunManifest> {
        let mut m = RunManifest::new(command, &config)?
            .seed("scenario", sc.seed)
            .seed("noise", sc.predictor.noise_seed)
            .seed("train", sc.predictor.train_seed);
        m.profile_versions = versions.clone();
        Ok(m)
    };

    if a.suite {
        let results = sim::run_baseline_suite(&sc, registry)?;
        let mut rows = Vec::new();
        for (policy, r) in &results {
            let dir = out.join(policy.name());
            let files = r.write_dir(&dir)?;
            manifest(&format!("simulate --policy {}", policy.name()))?.write(&dir, &files)?;
            rows.push((policy.name().to_string(), r.summary.clone()));
        }
        std::fs::write(out.join("report.md"), render_report(&rows))?;
        print!("{}", markdown_report(&cluster_rows(&rows)));
        manifest("simulate --suite")?.write(out, &["report.md".into()])
    } else {
        let r = sim::run(&sc, registry)?;
        let files = r.write_dir(out)?;
        let s = &r.summary;
        println!(
            "{} ({}): {:.5} tokens/J, QoS violation rate {:.4}",
            s.scenario,
            s.policy.name(),
            s.cluster.tokens_per_joule,
            s.cluster.qos_violation_rate
        );
        manifest(&format!("simulate --policy {}", sc.policy.name()))?.write(out, &files)
    }
}

fn cluster_rows(rows: &[(String, SimSummary)]) -> Vec<(String, pals::analysis::MetricsSummary)> {
    rows.iter().map(|(l, s)| (l.clone(), s.cluster.clone())).collect()
}

/// Cluster table followed by one table per node.
fn render_report(rows: &[(String, SimSummary)]) -> String {
    let mut out = String::from("## cluster\n\n");
    out.push_str(&markdown_report(&cluster_rows(rows)));
    let Some((_, first)) = rows.first() else { return out };
    for (i, node) in first.nodes.iter().enumerate() {
        let per: Vec<_> = rows
            .iter()
            .filter_map(|(l, s)| s.nodes.get(i).map(|n| (l.clone(), n.metrics.clone())))
            .collect();
        out.push_str(&format!(
            "\n## node {} (target {:.1} tokens/s)\n\n",
            node.node, node.throughput_target
        ));
        out.push_str(&markdown_report(&per));
    }
    out
}

#[derive(Serialize)]
struct DominanceRow {
    a: String,
    b: String,
    holds: bool,
    witnesses: usize,
}

#[derive(Serialize)]
struct ParetoSummary {
    model: String,
    peak_efficiency: BTreeMap<String, f64>,
    dominance: Vec<DominanceRow>,
}

#[derive(Serialize)]
struct FrontierCsvRow {
    power_cap: f64,
    batch_size: u32,
    tp: u32,
    ep: u32,
    dp: u32,
    throughput: f64,
    efficiency: f64,
}

fn cmd_pareto(a: &ParetoArgs, registry: &ProfileRegistry, out: &Path) -> Result<()> {
    let regimes: Vec<Regime> = a.regimes.iter().map(|r| r.parse()).collect::<pals::Result<_>>()?;
    let profile = registry.get(&a.model)?.clone();
    let model = PerfModel::new(profile.clone(), registry.gpu.clone(), SystemPowerCoeffs::default())?;
    let mut frontiers: Vec<(Regime, Vec<FrontierPoint>)> = Vec::new();
    let mut files = Vec::new();
    for r in &regimes {
        let preset = r.preset(profile.deployment.tp);
        let frontier = build_frontier(&preset.evaluate(&model)?);
        let name = format!("frontier-{}.csv", r.name());
        let mut w = csv::Writer::from_path(out.join(&name))?;
        for p in &frontier {
            w.serialize(FrontierCsvRow {
                power_cap: p.point.power_cap,
                batch_size: p.point.batch_size,
                tp: p.point.tp,
                ep: p.point.ep,
                dp: p.point.dp,
                throughput: p.throughput,
                efficiency: p.efficiency,
            })?;
        }
        w.flush()?;
        files.push(name);
        frontiers.push((*r, frontier));
    }
    let mut summary = ParetoSummary {
        model: a.model.clone(),
        peak_efficiency: frontiers
            .iter()
            .map(|(r, f)| (r.name().to_string(), peak_efficiency(f)))
            .collect(),
        dominance: Vec::new(),
    };
    for (ra, fa) in &frontiers {
        for (rb, fb) in &frontiers {
            if ra == rb {
                continue;
            }
            let check = verify_dominance(fa, fb);
            println!(
                "{} dominates {}: {}",
                ra.name(),
                rb.name(),
                if check.holds { "yes" } else { "no" }
            );
            summary.dominance.push(DominanceRow {
                a: ra.name().into(),
                b: rb.name().into(),
                holds: check.holds,
                witnesses: check.witnesses.len(),
            });
        }
    }
    write_json(&out.join("dominance.json"), &summary)?;
    files.push("dominance.json".into());
    let config = (&a.model, &regimes);
    let mut manifest = RunManifest::new("pareto", &config)?;
    manifest.profile_versions = profile_versions(registry, [a.model.as_str()])?;
    manifest.write(out, &files)
}

/// Summaries under `dir`: its own, or those of its subdirectories in
/// policy order.
fn collect_summaries(dir: &Path) -> Result<Vec<(String, SimSummary)>> {
    let own = dir.join("summary.json");
    if own.is_file() {
        let s: SimSummary = read_json(&own)?;
        return Ok(vec![(s.policy.name().to_string(), s)]);
    }
    let mut found = Vec::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path().join("summary.json");
        if p.is_file() {
            let s: SimSummary = read_json(&p)?;
            found.push(s);
        }
    }
    if found.is_empty() {
        return Err(Error::Data(format!("no summary.json under {}", dir.display())).into());
    }
    found.sort_by_key(|s| s.policy);
    Ok(found.into_iter().map(|s| (s.policy.name().to_string(), s)).collect())
}

fn cmd_report(a: &ReportArgs, out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    let mut input_hashes = Vec::new();
    for d in &a.results {
        for (label, s) in collect_summaries(d)? {
            input_hashes.push(sha256_hex(&serde_json::to_vec(&s)?));
            rows.push((label, s));
        }
    }
    let text = render_report(&rows);
    std::fs::write(out.join("report.md"), &text)?;
    print!("{text}");
    RunManifest::new("report", &input_hashes)?.write(out, &["report.md".into()])
}

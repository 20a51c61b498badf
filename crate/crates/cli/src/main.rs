use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use quorum_core::belief::CalibrationParams;
use quorum_core::calibration::calibrate;
use quorum_core::coordination::{DecisionMode, GuardrailThresholds};
use quorum_core::disclosure::DisclosureTier;
use quorum_core::harness::benchmark::{calibration_records, CalibrationMode};
use quorum_core::harness::config::RunConfig;
use quorum_core::harness::dataset::write_dataset;
use quorum_core::harness::simulate::{generate_dataset, generate_numeric_dataset, synthetic_profiles};
use quorum_core::harness::{
    compare_methods, compute_metrics, load_dataset, read_records, run_benchmark, sweep_thresholds, token_report,
};

#[derive(Parser)]
#[command(name = "quorum", version, about = "Calibrated multi-agent answer aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate calibration parameters from labeled data.
    Calibrate(CalibrateArgs),
    /// Run the decision procedure over a dataset and write run records.
    Run(RunArgs),
    /// Metrics and baseline comparison for a run-record file.
    Eval(EvalArgs),
    /// Write a synthetic labeled dataset and a matching config.
    Simulate(SimulateArgs),
    /// Replay records under a grid of guardrail thresholds (CSV output).
    Sweep(SweepArgs),
    /// Per-stage token accounting for a run-record file.
    Report(ReportArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Labeled dataset; the agent pool is queried on it.
    #[arg(long, conflicts_with = "records")]
    dataset: Option<PathBuf>,
    /// Existing labeled run records to calibrate from instead.
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Leave the provenance timestamp empty.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Calibration parameters; uncalibrated defaults when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    mode: Option<DecisionMode>,
    #[arg(long)]
    tier: Option<DisclosureTier>,
    #[arg(long)]
    calibration_mode: Option<CalibrationMode>,
    /// Guardrail thresholds as `k,tau_p,tau_m`.
    #[arg(long, value_parser = parse_thresholds)]
    thresholds: Option<GuardrailThresholds>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    records: PathBuf,
    /// Parameters for the weighted-vote and selection baselines.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Seed for majority-vote tie breaking.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "q")]
    id_prefix: String,
    /// Also write numeric questions instead of multiple choice.
    #[arg(long)]
    numeric: bool,
    /// Write a synthetic-pool config here.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Agent reliabilities for the written config.
    #[arg(long, value_delimiter = ',', default_value = "0.9,0.6,0.55")]
    reliabilities: Vec<f64>,
    /// Error-copy strength shared by all agents but the first.
    #[arg(long)]
    correlation: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    records: PathBuf,
    /// Explicit grid points as `k,tau_p,tau_m`; repeatable.
    #[arg(long, value_parser = parse_thresholds)]
    thresholds: Vec<GuardrailThresholds>,
    /// Values of tau_p combined with `--k` and `--tau-m`.
    #[arg(long, value_delimiter = ',')]
    tau_p: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0.25)]
    tau_m: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
}

fn parse_thresholds(s: &str) -> Result<GuardrailThresholds, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [k, p, m] = parts.as_slice() else {
        return Err(format!("expected k,tau_p,tau_m, got {s:?}"));
    };
    let k = k.parse().map_err(|e| format!("k: {e}"))?;
    let p = p.parse().map_err(|e| format!("tau_p: {e}"))?;
    let m = m.parse().map_err(|e| format!("tau_m: {e}"))?;
    GuardrailThresholds::new(k, p, m).map_err(|e| e.to_string())
}

fn load_params(path: Option<&Path>) -> Result<CalibrationParams> {
    match path {
        None => Ok(CalibrationParams::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            CalibrationParams::from_json(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.run.seed = seed;
    }
    if let Some(p) = args.parallelism {
        config.run.parallelism = p;
    }
    let records = match (&args.dataset, &args.records) {
        (_, Some(path)) => read_records(path)?,
        (Some(path), None) => {
            let dataset = load_dataset(path)?;
            let pool = config.build_pool()?;
            let (records, _) = run_benchmark(
                &dataset,
                &pool,
                None,
                &CalibrationParams::default(),
                &config.disclosure,
                &config.guardrail,
                DecisionMode::NoCoordinator,
                &config.benchmark_options(),
                None,
            )?;
            records
        }
        (None, None) => bail!("one of --dataset or --records is required"),
    };
    let cal = calibration_records(&records)?;
    let timestamp = (!args.no_timestamp).then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()));
    let params = calibrate(&cal, &config.calibration, timestamp)?;
    std::fs::write(&args.output, params.to_json()).with_context(|| format!("writing {}", args.output.display()))?;
    eprintln!("calibrated {} agents from {} records", params.alpha.len(), cal.len());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.run.seed = seed;
    }
    if let Some(p) = args.parallelism {
        config.run.parallelism = p;
    }
    if let Some(mode) = args.mode {
        config.run.mode = mode;
    }
    if let Some(tier) = args.tier {
        config.disclosure.tier = tier;
    }
    if let Some(m) = args.calibration_mode {
        config.run.calibration_mode = m;
    }
    if let Some(th) = args.thresholds {
        config.guardrail = th;
    }
    let params = config.run.calibration_mode.apply(&load_params(args.params.as_deref())?);
    let dataset = load_dataset(&args.dataset)?;
    let pool = config.build_pool()?;
    let coordinator = if config.run.mode.uses_coordinator() {
        Some(config.build_coordinator()?)
    } else {
        None
    };
    let file = File::create(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let mut out = BufWriter::new(file);
    let (_, metrics) = run_benchmark(
        &dataset,
        &pool,
        coordinator.as_deref(),
        &params,
        &config.disclosure,
        &config.guardrail,
        config.run.mode,
        &config.benchmark_options(),
        Some(&mut out),
    )
    .with_context(|| format!("writing {}", args.output.display()))?;
    out.flush()?;
    print_json(&metrics)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let records = read_records(&args.records)?;
    let metrics = compute_metrics(&records);
    let mut report = serde_json::json!({ "metrics": metrics });
    if records.iter().all(|r| r.gold.is_some()) && !records.is_empty() {
        let params = load_params(args.params.as_deref())?;
        report["methods"] = serde_json::to_value(compare_methods(&records, &params, args.seed)?)?;
    }
    print_json(&report)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let dataset = if args.numeric {
        generate_numeric_dataset(args.count, args.seed, &args.id_prefix)
    } else {
        generate_dataset(args.count, args.seed, &args.id_prefix)
    };
    write_dataset(&args.output, &dataset)?;
    if let Some(path) = &args.config {
        let mut config = RunConfig {
            agents: synthetic_profiles(&args.reliabilities, args.correlation),
            ..RunConfig::default()
        };
        if args.correlation.is_some() {
            let ids: Vec<String> = config.agents.iter().skip(1).map(|a| a.agent_id.clone()).collect();
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    config.calibration.pairs.push((a.clone(), b.clone()));
                }
            }
        }
        std::fs::write(path, config.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("wrote {} examples to {}", dataset.len(), args.output.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let records = read_records(&args.records)?;
    let mut grid = args.thresholds;
    for p in args.tau_p {
        grid.push(GuardrailThresholds::new(args.k, p, args.tau_m)?);
    }
    if grid.is_empty() {
        bail!("empty grid: pass --thresholds or --tau-p");
    }
    let rows = sweep_thresholds(&records, &grid)?;
    let fmt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    let mut csv = String::from("k,tau_p,tau_m,quality,overrides,override_rate,wrong_overrides,wrong_override_rate\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{:.6},{},{}\n",
            r.k,
            r.tau_p,
            r.tau_m,
            fmt(r.quality),
            r.overrides,
            r.override_rate,
            r.wrong_overrides.map_or(String::new(), |w| w.to_string()),
            fmt(r.wrong_override_rate)
        ));
    }
    match args.output {
        Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => print_json(&token_report(&read_records(&a.records)?)),
    }
}

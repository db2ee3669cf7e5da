//! Command line front end: `simulate`, `run` and `sweep`.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 I/O failure, 4 missing
//! or malformed inputs, 1 anything else.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::engine;
use crate::error::{Error, Result};
use crate::experiment::{self, files, ExperimentConfig, Method, MethodSummary, Repetition, SweepAxis};
use crate::metrics::RunMetrics;
use crate::model;
use crate::simulator;

#[derive(Debug, Parser)]
#[command(
    name = "crowdtruth",
    version,
    about = "Reputation-based truth discovery for mobile crowdsensing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scenario and write it as CSV inputs.
    Simulate(Common),
    /// Run the configured methods over seeded repetitions.
    Run(RunArgs),
    /// Repeat `run` across the levels of one scenario axis.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base seed (overrides `scenario.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated subset of prbtd, td, cnb, wei.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Number of repetitions (overrides `repetitions`).
    #[arg(long)]
    pub repetitions: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// One of sparsity, clean_fraction, mu, bursty.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated levels; the standard levels of the axis when omitted.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::Io(_) => 3,
        Error::MissingInput(_) | Error::Format { .. } => 4,
        _ => 1,
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Run(r) => run(r),
        Command::Sweep(s) => sweep(s),
    }
}

/// Loads the configuration and applies command line overrides.
pub fn resolve(common: &Common, methods: Option<&[String]>, repetitions: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.scenario.seed = seed;
    }
    if let Some(list) = methods {
        cfg.methods = list.iter().map(|m| m.parse()).collect::<Result<Vec<Method>>>()?;
        cfg.methods.dedup();
    }
    if let Some(n) = repetitions {
        cfg.repetitions = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_manifest(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join(files::MANIFEST), cfg.to_toml())?;
    Ok(())
}

fn simulate(args: &Common) -> Result<()> {
    let cfg = resolve(args, None, None)?;
    let world = simulator::simulate(&cfg.scenario)?;
    write_manifest(&cfg)?;
    let dir = &cfg.output;
    world.truth.write_csv(create(&dir.join(files::TRUTH))?)?;
    let reports: Vec<_> = world.reports().copied().collect();
    model::write_reports(create(&dir.join(files::REPORTS))?, &reports)?;
    simulator::write_history(create(&dir.join(files::HISTORY))?, &world.history)?;
    simulator::write_population(create(&dir.join(files::USERS))?, &world.profiles)?;
    println!(
        "wrote {} reports from {} users over {} slots to {}",
        reports.len(),
        world.profiles.len(),
        world.truth.slots(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    method: Method,
    repetition: usize,
    seed: u64,
    #[serde(flatten)]
    metrics: &'a RunMetrics,
    nonconverged_slots: usize,
    all_removed: bool,
}

fn write_repetitions(cfg: &ExperimentConfig, reps: &[Repetition]) -> Result<()> {
    let mut jsonl = create(&cfg.output.join(files::METRICS_JSON))?;
    for rep in reps {
        let results = match &rep.results {
            Ok(r) => r,
            Err(e) => {
                log::warn!("repetition {} (seed {}) failed: {e}", rep.index, rep.seed);
                continue;
            }
        };
        let dir = cfg.output.join(format!("rep_{}", rep.index));
        fs::create_dir_all(&dir)?;
        for res in results {
            let m = res.run.method;
            let column = (m != Method::Prbtd).then(|| m.name());
            engine::write_quality_records(
                create(&dir.join(format!("quality_{m}.csv")))?,
                &res.run.outcomes,
                column,
            )?;
            res.run
                .ledger
                .write_trajectory(create(&dir.join(format!("reputation_{m}.csv")))?)?;
            let line = MetricsLine {
                method: m,
                repetition: rep.index,
                seed: rep.seed,
                metrics: &res.metrics,
                nonconverged_slots: res.run.nonconverged_slots(),
                all_removed: res.all_removed,
            };
            serde_json::to_writer(&mut jsonl, &line).map_err(std::io::Error::from)?;
            jsonl.write_all(b"\n")?;
        }
    }
    jsonl.flush()?;
    Ok(())
}

fn summary_fields(s: &MethodSummary) -> [String; 4] {
    match &s.mean {
        Some(m) => [
            m.f1.to_string(),
            m.reputation_distance.to_string(),
            m.noise_reduction_ratio.to_string(),
            s.failures.len().to_string(),
        ],
        None => ["".into(), "".into(), "".into(), s.failures.len().to_string()],
    }
}

fn print_summary(label: &str, summaries: &[MethodSummary]) {
    for s in summaries {
        match &s.mean {
            Some(m) => println!(
                "{label}{:<6} f1={:.4} rd={:.4} nrr={:.4} runs={}",
                s.method.name(),
                m.f1,
                m.reputation_distance,
                m.noise_reduction_ratio,
                s.runs.len()
            ),
            None => println!("{label}{:<6} no successful runs", s.method.name()),
        }
    }
}

/// First error when no repetition succeeded.
fn fail_if_all_failed(reps: Vec<Repetition>) -> Result<Vec<Repetition>> {
    if reps.iter().all(|r| r.results.is_err()) {
        let first = reps.into_iter().next().expect("at least one repetition");
        return Err(first.results.expect_err("failed repetition"));
    }
    Ok(reps)
}

fn run(args: &RunArgs) -> Result<()> {
    let cfg = resolve(&args.common, args.methods.as_deref(), args.repetitions)?;
    write_manifest(&cfg)?;
    let reps = fail_if_all_failed(experiment::repeat_harness(&cfg, &cfg.seeds()))?;
    write_repetitions(&cfg, &reps)?;
    let summaries = experiment::summarize(&cfg.methods, &reps);
    let mut table = csv::Writer::from_writer(create(&cfg.output.join(files::METRICS_TABLE))?);
    table
        .write_record([
            "method",
            "f1",
            "reputation_distance",
            "noise_reduction_ratio",
            "failures",
        ])
        .map_err(model::csv_io)?;
    for s in &summaries {
        let mut row = vec![s.method.name().to_string()];
        row.extend(summary_fields(s));
        table.write_record(&row).map_err(model::csv_io)?;
    }
    table.flush()?;
    print_summary("", &summaries);
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let cfg = resolve(&args.run.common, args.run.methods.as_deref(), args.run.repetitions)?;
    let axis: SweepAxis = args.axis.parse()?;
    let values = args.values.clone().unwrap_or_else(|| axis.default_values());
    if values.is_empty() {
        return Err(Error::config("--values", "at least one level is required"));
    }
    write_manifest(&cfg)?;
    let rows = experiment::sweep(&cfg, axis, &values)?;
    if rows.iter().all(|r| r.summary.mean.is_none()) {
        // surface the underlying failure with its exit code
        experiment::run_repetition(&axis.apply(&cfg, values[0]), cfg.scenario.seed)?;
    }
    let path = cfg.output.join(format!("sweep_{}.csv", axis.name()));
    let mut table = csv::Writer::from_writer(create(&path)?);
    table
        .write_record([
            "axis",
            "value",
            "method",
            "f1",
            "reputation_distance",
            "noise_reduction_ratio",
            "failures",
        ])
        .map_err(model::csv_io)?;
    for r in &rows {
        let mut row = vec![
            axis.name().to_string(),
            r.value.to_string(),
            r.summary.method.name().to_string(),
        ];
        row.extend(summary_fields(&r.summary));
        table.write_record(&row).map_err(model::csv_io)?;
    }
    table.flush()?;
    for &v in &values {
        let block: Vec<MethodSummary> = rows
            .iter()
            .filter(|r| r.value == v)
            .map(|r| r.summary.clone())
            .collect();
        print_summary(&format!("{}={v} ", axis.name()), &block);
    }
    Ok(())
}

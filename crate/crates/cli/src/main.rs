#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod compare;
mod output;
mod scenario;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

use commands::{Command, RunOutput, SimulationError};
use compare::{CompareError, ReferenceSeries, Thresholds};
use output::{Format, OutputError, Table};
use scenario::{Scenario, ScenarioError, Sweep};

const OUT_DIR_ENV: &str = "LYOSIM_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "lyosim",
    version,
    about = "Freezing, primary and secondary drying of suspended vials"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Cooling, nucleation, solidification and final cooling of one vial.
    Freeze(RunArgs),
    /// Primary drying from a uniform frozen product.
    Primary(RunArgs),
    /// Secondary drying from a uniform dried cake.
    Secondary(RunArgs),
    /// Freezing, primary and secondary drying chained.
    Cycle(RunArgs),
    /// Primary drying with and without an undersized condenser.
    Failure(RunArgs),
    /// Biot numbers, lumped-vs-series transients and mass-transfer time scales.
    Analyze(RunArgs),
    /// Compare one column of a trajectory CSV against a reference series.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Scenario file (TOML). Defaults apply when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory; falls back to the scenario, then $LYOSIM_OUT_DIR, then ./lyosim-out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for stochastic nucleation.
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with status 4 when a reference comparison exceeds its threshold.
    #[arg(long)]
    assert: bool,
    /// Run once per value: `path=start:stop:n`, path relative to the parameter set.
    #[arg(long)]
    sweep: Option<Sweep>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Trajectory CSV written by a simulation subcommand.
    #[arg(long)]
    simulated: PathBuf,
    /// Two-column reference CSV: time in seconds, then the observable.
    #[arg(long)]
    reference: PathBuf,
    /// Column of the trajectory to compare; defaults to the reference's value header.
    #[arg(long)]
    observable: Option<String>,
    #[arg(long)]
    max_abs: Option<f64>,
    #[arg(long)]
    rmse: Option<f64>,
    #[arg(long)]
    terminal_time_rel: Option<f64>,
    #[arg(long)]
    assert: bool,
    /// Also write the report to this JSON file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Compare(#[from] CompareError),
    #[error("simulation failed in stage `{}`: {}", .0.stage, .0.message)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("reference thresholds exceeded: {0}")]
    Threshold(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Output(_) => 1,
            CliError::Scenario(_) | CliError::Compare(_) => 2,
            CliError::Simulation(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Sub::Freeze(a) => simulate(Command::Freeze, a),
        Sub::Primary(a) => simulate(Command::Primary, a),
        Sub::Secondary(a) => simulate(Command::Secondary, a),
        Sub::Cycle(a) => simulate(Command::Cycle, a),
        Sub::Failure(a) => simulate(Command::Failure, a),
        Sub::Analyze(a) => simulate(Command::Analyze, a),
        Sub::Compare(a) => compare_files(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn output_dir(flag: Option<PathBuf>, scenario: &Scenario) -> PathBuf {
    flag.or_else(|| scenario.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("lyosim-out"))
}

fn simulate(command: Command, args: RunArgs) -> Result<(), CliError> {
    let mut scenario = match &args.scenario {
        Some(path) => Scenario::load(path)?,
        None => Scenario::default(),
    };
    if let Some(seed) = args.seed {
        if !scenario.apply_seed(seed) {
            eprintln!("note: --seed has no effect, nucleation is controlled");
        }
    }
    let dir = output_dir(args.out, &scenario);
    output::create_dir(&dir)?;
    match args.sweep {
        None => {
            let violations = run_one(command, &scenario, &dir, args.format)?;
            println!("wrote {}", dir.display());
            finish(args.assert, violations)
        }
        Some(sweep) => run_sweep(command, &scenario, &sweep, &dir, args.format, args.assert),
    }
}

fn finish(assert: bool, violations: Vec<String>) -> Result<(), CliError> {
    for v in &violations {
        eprintln!("threshold exceeded: {v}");
    }
    if assert && !violations.is_empty() {
        return Err(CliError::Threshold(violations.join("; ")));
    }
    Ok(())
}

/// Runs one scenario into `dir` and returns the threshold violations of its
/// reference comparisons.
fn run_one(command: Command, scenario: &Scenario, dir: &Path, format: Format) -> Result<Vec<String>, CliError> {
    let start = Instant::now();
    let out = commands::run(command, scenario)?;
    let wall = start.elapsed().as_secs_f64();
    let (references, violations) = check_references(scenario, &out.tables)?;
    let mut files = Vec::new();
    for t in &out.tables {
        let path = t.write(dir, format)?;
        files.push(path.file_name().map(|f| f.to_string_lossy().into_owned()));
    }
    output::write_effective(&dir.join("effective_params.toml"), scenario)?;
    let summary = json!({
        "command": command.name(),
        "scenario": scenario.name,
        "seed": scenario.seed,
        "results": out.summary,
        "references": references,
        "files": files,
        "wall_time_s": wall,
    });
    output::write_json(&dir.join("summary.json"), &summary)?;
    for (k, v) in &out.headline {
        println!("{k} = {v}");
    }
    Ok(violations)
}

fn check_references(scenario: &Scenario, tables: &[Table]) -> Result<(Vec<Value>, Vec<String>), CliError> {
    let mut reports = Vec::new();
    let mut violations = Vec::new();
    for check in &scenario.references {
        let table = tables
            .iter()
            .find(|t| t.name == check.table)
            .ok_or_else(|| CompareError::MissingTable(check.table.clone()))?;
        let column = |name: &str| {
            table.numeric(name).ok_or_else(|| CompareError::MissingColumn {
                path: PathBuf::from(&check.table),
                column: name.to_string(),
            })
        };
        let (t, v) = (column("t_s")?, column(&check.observable)?);
        let reference = ReferenceSeries::read(&check.file)?;
        let metrics = compare::compare(&t, &v, &reference)?;
        let limits = Thresholds {
            max_abs: check.max_abs,
            rmse: check.rmse,
            terminal_time_rel: check.terminal_time_rel,
        };
        let failed = limits.violations(&metrics);
        violations.extend(
            failed
                .iter()
                .map(|m| format!("{}.{} {m}", check.table, check.observable)),
        );
        reports.push(json!({
            "table": check.table,
            "file": check.file,
            "metrics": metrics,
            "thresholds": limits,
            "exceeded": failed,
        }));
    }
    Ok((reports, violations))
}

fn run_sweep(
    command: Command,
    base: &Scenario,
    sweep: &Sweep,
    dir: &Path,
    format: Format,
    assert: bool,
) -> Result<(), CliError> {
    let mut runs = Vec::with_capacity(sweep.values.len());
    for &v in &sweep.values {
        let mut s = base.clone();
        s.set_number(&sweep.path, v)?;
        runs.push(s);
    }
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(runs.len());
    let mut results: Vec<Option<MemberResult>> = Vec::new();
    results.resize_with(runs.len(), || None);
    std::thread::scope(|scope| {
        let chunk = runs.len().div_ceil(workers);
        for (w, slots) in results.chunks_mut(chunk).enumerate() {
            let runs = &runs;
            scope.spawn(move || {
                for (k, slot) in slots.iter_mut().enumerate() {
                    let i = w * chunk + k;
                    *slot = Some(sweep_member(
                        command,
                        &runs[i],
                        &dir.join(format!("sweep_{i:03}")),
                        format,
                    ));
                }
            });
        }
    });
    let mut table_rows = Vec::new();
    let mut violations = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (out, v) = r.expect("every sweep member ran")?;
        violations.extend(v.into_iter().map(|s| format!("sweep_{i:03}: {s}")));
        table_rows.push(out.headline);
    }
    let mut table = Table::new("sweep")
        .column("index", (0..sweep.values.len()).map(|i| i as f64))
        .column(&sweep.path, sweep.values.iter().copied());
    if let Some(first) = table_rows.first() {
        for key in first.keys() {
            table = table.column(key, table_rows.iter().map(|h| h.get(key).copied()));
        }
    }
    table.write(dir, format)?;
    println!("wrote {} runs under {}", sweep.values.len(), dir.display());
    finish(assert, violations)
}

type MemberResult = Result<(RunOutput, Vec<String>), CliError>;

fn sweep_member(command: Command, scenario: &Scenario, dir: &Path, format: Format) -> MemberResult {
    output::create_dir(dir)?;
    let out = commands::run(command, scenario)?;
    let (references, violations) = check_references(scenario, &out.tables)?;
    for t in &out.tables {
        t.write(dir, format)?;
    }
    output::write_effective(&dir.join("effective_params.toml"), scenario)?;
    output::write_json(
        &dir.join("summary.json"),
        &json!({ "command": command.name(), "results": out.summary, "references": references }),
    )?;
    Ok((out, violations))
}

fn compare_files(args: CompareArgs) -> Result<(), CliError> {
    let reference = ReferenceSeries::read(&args.reference)?;
    let observable = args.observable.unwrap_or_else(|| reference.observable.clone());
    let (t, v) = compare::read_simulated(&args.simulated, &observable)?;
    let metrics = compare::compare(&t, &v, &reference)?;
    let limits = Thresholds {
        max_abs: args.max_abs,
        rmse: args.rmse,
        terminal_time_rel: args.terminal_time_rel,
    };
    let failed = limits.violations(&metrics);
    let report = json!({ "observable": observable, "metrics": metrics, "thresholds": limits, "exceeded": failed });
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report is plain data")
    );
    if let Some(path) = &args.out {
        output::write_json(path, &report)?;
    }
    finish(
        args.assert,
        failed.iter().map(|m| format!("{observable} {m}")).collect(),
    )
}

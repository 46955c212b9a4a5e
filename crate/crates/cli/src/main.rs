//! `tesmpc`: runs the hybrid thermal management NMPC in closed loop.
//!
//! Exit codes: 0 success, 1 a validation suite failed, 2 configuration or
//! output error, 3 the run failed part way (partial artifacts are written).

mod suites;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use tesmpc_core::config::ConfigFile;
use tesmpc_core::sim::{
    profile_execution, run_closed_loop, run_comparison, write_plot_series, write_run_csv, write_state_csv,
    ComparisonReport, PlantMode, RunLog, TimingSummary,
};
use tesmpc_core::{Config, Scenario};

use suites::{Fault, Suites};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(tesmpc_core::Error),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: tesmpc_core::Error },
    #[error("run failed at t = {time_s} s: {message}")]
    Runtime { time_s: f64, message: String },
    #[error("{0} validation suite(s) failed")]
    Validation(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Config(_) | CliError::Output { .. } => 2,
            CliError::Runtime { .. } => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "tesmpc", version, about = "Hybrid thermal management NMPC simulator")]
struct Cli {
    /// Configuration file or directory (system.toml, nmpc.toml, scenario.toml).
    #[arg(long, global = true, env = "TESMPC_CONFIG_DIR")]
    config: Option<PathBuf>,

    /// More log output on stderr; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one closed-loop experiment.
    Simulate(RunArgs),
    /// Run the hybrid and the storage-free loop on the same scenario.
    Compare(RunArgs),
    /// Run one experiment and report controller execution times.
    Profile(RunArgs),
    /// Run the seeded property suites.
    Validate(ValidateArgs),
    /// Write the default configuration files.
    ExportDefaults {
        #[arg(long, default_value = "tesmpc-config")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Hybrid,
    NoTes,
}

impl From<Mode> for PlantMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Hybrid => PlantMode::Hybrid,
            Mode::NoTes => PlantMode::NoTes,
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Scenario file with a [scenario] section; overrides the configuration.
    #[arg(long)]
    scenario: Option<PathBuf>,

    /// Output directory.
    #[arg(long, default_value = "tesmpc-out")]
    out: PathBuf,

    /// Plant configuration; defaults to the scenario's.
    #[arg(long, value_enum)]
    mode: Option<Mode>,

    /// Also write one CSV series per plotted channel into <out>/plots.
    #[arg(long)]
    emit_plots: bool,

    /// Also write the full state trajectory.
    #[arg(long)]
    states: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Random cases per suite.
    #[arg(long, default_value_t = 20)]
    cases: usize,

    /// Corrupt an input on purpose; the matching suite must fail.
    #[arg(long, value_enum)]
    inject_fault: Option<Fault>,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).map_err(CliError::Config),
        None => Ok(Config::default()),
    }
}

fn load_scenario(cfg: &Config, args: &RunArgs) -> Result<Scenario> {
    let mut scenario = match &args.scenario {
        Some(p) => ConfigFile::read(p)
            .map_err(CliError::Config)?
            .scenario
            .ok_or_else(|| CliError::Config(tesmpc_core::Error::Config(format!("{}: no [scenario] section", p.display()))))?,
        None => cfg.scenario_or_default().map_err(CliError::Config)?,
    };
    if let Some(m) = args.mode {
        scenario.mode = m.into();
    }
    scenario.validate().map_err(CliError::Config)?;
    Ok(scenario)
}

fn output<T>(path: &Path, r: tesmpc_core::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Output { path: path.to_path_buf(), source })
}

fn prepare_dir(dir: &Path) -> Result<()> {
    output(dir, fs::create_dir_all(dir).map_err(Into::into))
}

fn write_timing(path: &Path, t: &TimingSummary) -> Result<()> {
    let write = || -> tesmpc_core::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["count", "min_s", "median_s", "p95_s", "max_s", "mean_s", "deadline_s", "deadline_misses"])?;
        w.write_record([
            t.count.to_string(),
            t.min_s.to_string(),
            t.median_s.to_string(),
            t.p95_s.to_string(),
            t.max_s.to_string(),
            t.mean_s.to_string(),
            t.deadline_s.to_string(),
            t.deadline_misses.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    };
    output(path, write())
}

/// Writes the run log and its companions; returns the paths written.
fn write_run(log: &RunLog, args: &RunArgs, comparison: Option<&ComparisonReport>) -> Result<Vec<PathBuf>> {
    let label = log.mode.label();
    let mut written = Vec::new();
    let runlog = args.out.join(format!("runlog_{label}.csv"));
    output(&runlog, write_run_csv(log, &runlog))?;
    written.push(runlog);
    let timing = args.out.join(format!("timing_{label}.csv"));
    write_timing(&timing, &profile_execution(log))?;
    written.push(timing);
    if args.states {
        let p = args.out.join(format!("states_{label}.csv"));
        output(&p, write_state_csv(log, &p))?;
        written.push(p);
    }
    if args.emit_plots {
        let dir = args.out.join("plots").join(label);
        written.extend(output(&dir, write_plot_series(&dir, log, comparison))?);
    }
    Ok(written)
}

fn check_complete(log: &RunLog) -> Result<()> {
    match &log.failure {
        None => Ok(()),
        Some(f) => Err(CliError::Runtime { time_s: f.time_s, message: f.message.clone() }),
    }
}

fn print_timing(label: &str, t: &TimingSummary) {
    println!(
        "{label}: {} solves, median {:.3} s, p95 {:.3} s, max {:.3} s, {} over the {:.1} s deadline",
        t.count, t.median_s, t.p95_s, t.max_s, t.deadline_misses, t.deadline_s
    );
}

fn simulate(cfg: &Config, args: &RunArgs) -> Result<()> {
    let scenario = load_scenario(cfg, args)?;
    prepare_dir(&args.out)?;
    let log = run_closed_loop(&scenario, &cfg.system, &cfg.nmpc).map_err(CliError::Config)?;
    let written = write_run(&log, args, None)?;
    println!(
        "{} run: {} steps, peak cold plate {:.2} C",
        log.mode.label(),
        log.records.len(),
        log.peak_cold_plate_c()
    );
    print_timing("controller", &profile_execution(&log));
    for p in &written {
        println!("wrote {}", p.display());
    }
    check_complete(&log)
}

fn write_comparison(path: &Path, r: &ComparisonReport) -> Result<()> {
    let write = || -> tesmpc_core::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "value"])?;
        for (k, v) in [
            ("hybrid_peak_C", r.hybrid_peak_c),
            ("no_tes_peak_C", r.no_tes_peak_c),
            ("peak_reduction_C", r.peak_reduction_c),
            ("peak_difference_C", r.peak_difference_c),
            ("peak_difference_time_s", r.peak_difference_time_s),
            ("hybrid_mean_total_flow_kgps", r.hybrid_mean_total_flow_kgps),
            ("no_tes_mean_total_flow_kgps", r.no_tes_mean_total_flow_kgps),
        ] {
            w.write_record([k.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    };
    output(path, write())
}

fn compare(cfg: &Config, args: &RunArgs) -> Result<()> {
    let scenario = load_scenario(cfg, args)?;
    prepare_dir(&args.out)?;
    let (hybrid, no_tes, report) = run_comparison(&scenario, &cfg.system, &cfg.nmpc).map_err(CliError::Config)?;
    let mut written = write_run(&hybrid, args, Some(&report))?;
    written.extend(write_run(&no_tes, args, Some(&report))?);
    let summary = args.out.join("comparison.csv");
    write_comparison(&summary, &report)?;
    written.push(summary);
    println!(
        "peak cold plate: hybrid {:.2} C, no-tes {:.2} C, reduction {:.2} C",
        report.hybrid_peak_c, report.no_tes_peak_c, report.peak_reduction_c
    );
    println!(
        "largest gap {:.2} C at {:.0} s; mean total flow hybrid {:.4} kg/s, no-tes {:.4} kg/s",
        report.peak_difference_c,
        report.peak_difference_time_s,
        report.hybrid_mean_total_flow_kgps,
        report.no_tes_mean_total_flow_kgps
    );
    for p in &written {
        println!("wrote {}", p.display());
    }
    check_complete(&hybrid)?;
    check_complete(&no_tes)
}

fn profile(cfg: &Config, args: &RunArgs) -> Result<()> {
    let scenario = load_scenario(cfg, args)?;
    prepare_dir(&args.out)?;
    let log = run_closed_loop(&scenario, &cfg.system, &cfg.nmpc).map_err(CliError::Config)?;
    let timing = profile_execution(&log);
    let path = args.out.join(format!("timing_{}.csv", log.mode.label()));
    write_timing(&path, &timing)?;
    print_timing(log.mode.label(), &timing);
    println!("min {:.4} s, mean {:.4} s", timing.min_s, timing.mean_s);
    println!("wrote {}", path.display());
    check_complete(&log)
}

fn validate(cfg: &Config, args: &ValidateArgs) -> Result<()> {
    let results = Suites { config: cfg, seed: args.seed, cases: args.cases, fault: args.inject_fault }.run();
    println!("seed {}, {} cases per suite", args.seed, args.cases);
    for r in &results {
        println!("{:<24} {:<4} {}", r.name, if r.passed { "pass" } else { "FAIL" }, r.detail);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} suites passed", results.len());
        Ok(())
    } else {
        println!("failed: {}", failed.join(", "));
        Err(CliError::Validation(failed.len()))
    }
}

fn export_defaults(out: &Path) -> Result<()> {
    let written = output(out, tesmpc_core::config::export_defaults(out))?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::ExportDefaults { out } = &cli.command {
        return export_defaults(out);
    }
    let cfg = load_config(cli.config.as_deref())?;
    info!("configuration loaded");
    match &cli.command {
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Compare(a) => compare(&cfg, a),
        Command::Profile(a) => profile(&cfg, a),
        Command::Validate(a) => validate(&cfg, a),
        Command::ExportDefaults { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

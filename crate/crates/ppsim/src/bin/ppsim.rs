//! Command-line front end: run scenario files, bundled presets, gap sweeps,
//! and summary recomputation from exported traces.
//!
//! Exit codes: 0 all checks passed, 1 at least one check failed, 2 the
//! configuration or input could not be used.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ppsim::scenario::{
    attach_universal_checks, load_scenario, preset_names, run_preset, run_scenario_file,
    sweep_gaps, Overrides, PresetOutcome, ScenarioError,
};
use ppsim::{SummaryReport, Trace};

#[derive(Parser)]
#[command(name = "ppsim", version, about = "Power packet network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunFlags {
    /// Integration step, microseconds.
    #[arg(long, value_name = "US")]
    dt: Option<f64>,
    /// Run length, milliseconds.
    #[arg(long, value_name = "MS")]
    duration: Option<f64>,
    /// Directory for trace and summary artifacts.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Record a sample at every integration step.
    #[arg(long)]
    full_rate: bool,
    /// Seed for scripted demand lines.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

impl RunFlags {
    fn overrides(&self, gap_mm: Option<f64>) -> Overrides {
        Overrides {
            dt_us: self.dt,
            duration_ms: self.duration,
            gap_mm,
            seed: self.seed,
            full_rate: self.full_rate,
            out_dir: Some(self.out.clone()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file.
    Run {
        /// Path to a versioned scenario document.
        scenario: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run a bundled preset experiment with its embedded checks.
    Preset {
        /// Preset name; omit with --list to enumerate.
        name: Option<String>,
        /// List the bundled presets and exit.
        #[arg(long)]
        list: bool,
        /// Replace the coil gap of every wireless link, millimeters.
        #[arg(long, value_name = "MM")]
        gap: Option<f64>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the storage-sharing network across a grid of coil gaps.
    Sweep {
        /// Gaps to simulate, millimeters.
        #[arg(
            long,
            value_name = "MM",
            value_delimiter = ',',
            default_values_t = [50.0, 100.0, 250.0]
        )]
        gaps: Vec<f64>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Recompute a summary from an exported structured-record trace.
    Report {
        /// Path to a .trace.json file.
        trace: PathBuf,
    },
}

fn print_outcome(outcome: &PresetOutcome) {
    for run in &outcome.runs {
        println!("{}", run.report);
    }
    if let Some(aggregate) = &outcome.aggregate {
        println!("{}", aggregate);
    }
    println!(
        "{}: {}",
        outcome.name,
        if outcome.passed() { "PASS" } else { "FAIL" }
    );
}

fn real_main() -> Result<bool, ScenarioError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, flags } => {
            let sc = load_scenario(&scenario)?;
            let outcome = run_scenario_file(sc, &flags.overrides(None))?;
            print_outcome(&outcome);
            Ok(outcome.passed())
        }
        Command::Preset {
            name,
            list,
            gap,
            flags,
        } => {
            if list {
                for n in preset_names() {
                    println!("{}", n);
                }
                return Ok(true);
            }
            let Some(name) = name else {
                return Err(ScenarioError::Validation(
                    "preset needs a name, or --list".to_string(),
                ));
            };
            let outcome = run_preset(&name, &flags.overrides(gap))?;
            print_outcome(&outcome);
            Ok(outcome.passed())
        }
        Command::Sweep { gaps, flags } => {
            let outcome = sweep_gaps(&gaps, &flags.overrides(None))?;
            print_outcome(&outcome);
            Ok(outcome.passed())
        }
        Command::Report { trace } => {
            let text = fs::read_to_string(&trace)?;
            let trace = Trace::from_json(&text).map_err(|e| {
                ScenarioError::Validation(format!("not a structured-record trace: {}", e))
            })?;
            let mut report = SummaryReport::from_trace(&trace);
            attach_universal_checks(&trace, &mut report);
            println!("{}", report);
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(2)
        }
    }
}

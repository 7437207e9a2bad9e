use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "urbanaq", version, about = "Urban air-quality network simulator and analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ThermalChoice {
    /// Apparent temperature from air and radiant temperature, humidity and wind.
    Apparent,
    /// Air temperature unchanged.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompareMode {
    /// Heavy-traffic stations against fitness-path stations.
    Paths,
    /// Mobile samples against the fixed stations they pass near.
    MobileFixed,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and store everything the server receives.
    Simulate {
        /// Scenario file, or the name of a bundled scenario (pisa-default, pisa-mobile-bias).
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "apparent")]
        thermal_model: ThermalChoice,
    },
    /// Recompute AQI and thermal comfort indexes from stored measurements.
    Indexes {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "apparent")]
        thermal_model: ThermalChoice,
        /// Index update period in seconds.
        #[arg(long, default_value_t = 900)]
        period_s: i64,
    },
    /// Compare two populations of stored measurements.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: CompareMode,
        #[arg(long)]
        out: PathBuf,
        /// Association radius around fixed stations, in meters.
        #[arg(long, default_value_t = 500.0)]
        radius_m: f64,
        /// Number of PMF bins per quantity.
        #[arg(long, default_value_t = urbanaq_core::analytics::DEFAULT_BINS)]
        bins: usize,
    },
    /// Evaluate the traffic index of one access.
    Traffic {
        /// TOML description of the access.
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate {
            scenario,
            out,
            seed,
            thermal_model,
        } => commands::simulate(&scenario, &out, seed, thermal_model),
        Command::Indexes {
            data,
            out,
            thermal_model,
            period_s,
        } => commands::indexes(&data, &out, thermal_model, period_s),
        Command::Compare {
            data,
            mode,
            out,
            radius_m,
            bins,
        } => commands::compare(&data, mode, &out, radius_m, bins),
        Command::Traffic { config } => commands::traffic(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

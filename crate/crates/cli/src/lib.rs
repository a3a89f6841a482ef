//! Command-line front end: argument parsing, config loading and run output.

pub mod commands;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use ionnet::config::{load_file, ConfigError, LoadedConfig, Preset};
use thiserror::Error;

use commands::Transport;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(ConfigError),
    #[error("runtime: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ionnet", version, about = "Multiplexed trapped-ion entanglement simulator")]
pub struct Cli {
    /// Config file (TOML); its `scenario` names the preset it overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true, default_value = "1.2km")]
    pub preset: String,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "ionnet-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TransportArg {
    Loopback,
    Socket,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Error budget table of the config.
    Budget,
    /// Ion-photon tomography of one node.
    IonPhoton {
        /// Shots per basis (default from config).
        #[arg(long)]
        shots: Option<u64>,
    },
    /// Two-node heralded-entanglement campaign.
    IonIon {
        #[arg(long, default_value_t = 1000)]
        events: u64,
        #[arg(long)]
        modes: Option<u32>,
        #[arg(long, value_enum, default_value = "loopback")]
        transport: TransportArg,
        /// Seed-parallel campaigns; the events are split between them.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Success-per-round enhancement against the number of modes.
    Enhancement {
        #[arg(long, default_value_t = 10)]
        max_modes: u32,
        /// Single-mode successes that end the sweep.
        #[arg(long, default_value_t = 4000)]
        events: u64,
    },
    /// Fit of a spin-echo coherence curve (synthetic unless --data is given).
    Coherence {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Synthetic parity scans from the config's phase model.
    SimulateScan,
    /// Fit of ion-photon phases from parity-scan CSVs.
    CalibratePhase {
        scans: Vec<PathBuf>,
    },
    /// Recomputes the calibrated preset constants.
    Calibrate {
        #[arg(long, default_value_t = 20000)]
        events: u64,
    },
    /// Prints the merged config and its digest.
    ShowConfig,
}

/// Loads the config and applies the flag overrides, which are recorded like
/// file overrides.
pub fn load(cli: &Cli) -> Result<LoadedConfig, CliError> {
    let mut loaded = match &cli.config {
        Some(p) => load_file(p).map_err(CliError::Config)?,
        None => {
            let p = Preset::parse(&cli.preset).ok_or_else(|| CliError::Usage(format!("unknown preset `{}` (20m, 1.2km, custom)", cli.preset)))?;
            LoadedConfig::from_preset(p)
        }
    };
    if let Some(seed) = cli.seed {
        loaded.config.seed = seed;
        loaded.overrides.insert("seed".into(), seed.to_string());
    }
    if let Command::IonIon { modes: Some(m), .. } = cli.command {
        loaded.config.timing.modes_per_round = m;
        loaded.overrides.insert("timing.modes_per_round".into(), m.to_string());
        loaded.config.validate().map_err(CliError::Config)?;
    }
    Ok(loaded)
}

pub fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let loaded = load(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Budget => commands::cmd_budget(&loaded, out),
        Command::IonPhoton { shots } => commands::cmd_ion_photon(&loaded, out, *shots),
        Command::IonIon { events, transport, jobs, .. } => {
            let t = match transport {
                TransportArg::Loopback => Transport::Loopback,
                TransportArg::Socket => Transport::Socket,
            };
            commands::cmd_ion_ion(&loaded, out, *events, t, *jobs)
        }
        Command::Enhancement { max_modes, events } => commands::cmd_enhancement(&loaded, out, *max_modes, *events),
        Command::Coherence { data } => commands::cmd_coherence(&loaded, out, data.as_deref()),
        Command::SimulateScan => commands::cmd_simulate_scan(&loaded, out),
        Command::CalibratePhase { scans } => commands::cmd_calibrate_phase(&loaded, out, scans),
        Command::Calibrate { events } => commands::cmd_calibrate(&loaded, out, *events),
        Command::ShowConfig => commands::cmd_show_config(&loaded),
    }
}

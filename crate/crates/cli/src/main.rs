#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rotortrap::config::{Config, REFERENCE_CONFIG};
use rotortrap::signal::DetectionModel;

mod dynamics;
mod output;
mod spin;

use output::{CliError, CliResult, Family};

#[derive(Debug, Parser)]
#[command(name = "rotortrap", version, about = "Rotation of charged rigid particles in Paul traps")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// `key = value` configuration file; the built-in reference rod and trap
    /// are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set trap.v0_volts=900`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for synthetic noise; the second field uses seed + 1.
    #[arg(long, default_value_t = 0, global = true)]
    pub seed: u64,
    /// Worker threads for parallel sweeps.
    #[arg(long, env = "ROTORTRAP_JOBS", global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".", global = true)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Planar pendulum trajectory and regime label.
    SimulatePendulum,
    /// Lock-in and lock-out frequencies over a voltage grid.
    PhaseDiagram,
    /// Full rigid-body trajectory and secular frequencies.
    #[command(name = "simulate-3d")]
    Simulate3d,
    /// Power spectrum of the detected signal of a 3-D trajectory.
    Psd(PsdArgs),
    /// Continuous ODMR of a rotating diamond.
    Odmr,
    /// Stroboscopic ODMR maps in the two configured fields.
    Strobe,
    /// Reconstruct the rotation from stroboscopic maps.
    Fit(FitArgs),
}

#[derive(Debug, Args)]
pub struct PsdArgs {
    /// Trajectory CSV written by `simulate-3d`.
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Lab-frame detection axis `x,y,z`.
    #[arg(long, default_value = "1,0,0")]
    pub axis: String,
    /// `squared` or `linear` projection of the long axis.
    #[arg(long, default_value = "squared")]
    pub detector: DetectionModel,
    /// Number of Welch segments.
    #[arg(long = "psd-segments", default_value_t = 8)]
    pub segments: usize,
    /// Fraction of a segment shared with the next one.
    #[arg(long = "psd-overlap", default_value_t = 0.5)]
    pub overlap: f64,
    /// Peak threshold above the median level (dB).
    #[arg(long = "threshold-db", default_value_t = rotortrap::signal::DEFAULT_THRESHOLD_DB)]
    pub threshold_db: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Map in the first field; its sidecar is the same path with extension `.sidecar`.
    #[arg(long)]
    pub map1: PathBuf,
    /// Map in the second field; omit for a single-field fit.
    #[arg(long)]
    pub map2: Option<PathBuf>,
    /// Resonances expected per delay.
    #[arg(long, default_value_t = 8)]
    pub lines: usize,
    /// Multi-start count.
    #[arg(long, default_value_t = 32)]
    pub starts: usize,
}

impl Common {
    pub fn load_config(&self) -> CliResult<Config> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| CliError::new(Family::Config, e).context(format!("reading {}", path.display())))?,
            None => REFERENCE_CONFIG.to_string(),
        };
        let mut config = Config::parse(&text).map_err(|e| {
            let name = self.config.as_ref().map_or("reference config".into(), |p| p.display().to_string());
            CliError::from(e).context(name)
        })?;
        for o in &self.overrides {
            config.set_override(o).map_err(|e| CliError::from(e).context(format!("--set {o}")))?;
        }
        Ok(config)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::new(Family::Io, e))?;
    }
    let c = &cli.common;
    match &cli.command {
        Command::SimulatePendulum => dynamics::simulate_pendulum(c),
        Command::PhaseDiagram => dynamics::phase_diagram(c),
        Command::Simulate3d => dynamics::simulate_3d(c),
        Command::Psd(args) => dynamics::psd(c, args),
        Command::Odmr => spin::odmr(c),
        Command::Strobe => spin::strobe(c),
        Command::Fit(args) => spin::fit(c, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.family.exit_code())
        }
    }
}

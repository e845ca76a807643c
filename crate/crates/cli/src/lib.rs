//! `fcpbc` command-line front end.

pub mod commands;
pub mod config;
pub mod exit;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fcpbc::ControllerMode;

use crate::commands::{EquilibriumArgs, VerifyArgs};
use crate::config::Overrides;
use crate::exit::CliError;

#[derive(Debug, Parser)]
#[command(name = "fcpbc", version, about = "Fuel-cell boost converter PI-PBC simulator and verification suite")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerArg {
    FullInfo,
    Adaptive,
    OpenLoop,
}

impl From<ControllerArg> for ControllerMode {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::FullInfo => ControllerMode::FullInfo,
            ControllerArg::Adaptive => ControllerMode::Adaptive,
            ControllerArg::OpenLoop => ControllerMode::OpenLoop,
        }
    }
}

/// Flags shared by every command that resolves a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenario preset: vref-pulse, load-pulse or constant.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long, value_enum)]
    pub controller: Option<ControllerArg>,
    /// Control period in seconds.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub duration: Option<f64>,
    /// Seed of the measurement noise generator.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write floats in shortest round-trip form instead of 9 significant digits.
    #[arg(long)]
    pub exact: bool,
    /// Fault injection: the full-information controller sees the negated output.
    #[arg(long, hide = true)]
    pub fault_flip_output: bool,
    #[arg(long)]
    pub quiet: bool,
}

impl RunFlags {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            scenario: self.scenario.clone(),
            controller: self.controller.map(Into::into),
            dt: self.dt,
            duration: self.duration,
            seed: self.seed,
            exact: self.exact,
            fault_flip_output: self.fault_flip_output,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one closed-loop simulation.
    Simulate {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Solve the equilibrium for a parameter vector and setpoint.
    Equilibrium {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        theta_r1: Option<f64>,
        #[arg(long)]
        theta_r2: Option<f64>,
        #[arg(long)]
        theta_s1: Option<f64>,
        #[arg(long)]
        theta_s2: Option<f64>,
        #[arg(long)]
        e_oc: Option<f64>,
        /// Output voltage setpoint; defaults to the scenario's first reference.
        #[arg(long)]
        x3_ref: Option<f64>,
        /// Initial x2 guess for Newton.
        #[arg(long)]
        guess: Option<f64>,
    },
    /// Run the property suite on a simulation or a recorded trace.
    Verify {
        #[command(flatten)]
        run: RunFlags,
        /// Trace CSV to check instead of simulating.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Random pairs for the monotonicity check.
        #[arg(long, default_value_t = 100_000)]
        pairs: usize,
        /// Minimum growth per second of the excitation integrals.
        #[arg(long, default_value_t = 1e-3)]
        excitation_threshold: f64,
    },
    /// Run the estimator offline over recorded measurements.
    ReplayEstimator {
        #[command(flatten)]
        run: RunFlags,
        /// CSV with columns t, x1, x2, x3, i_fc, u.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "replay")]
        out: PathBuf,
    },
    /// Run many configurations in parallel, capped by FCPBC_THREADS.
    Batch {
        /// Config files, one run each (crossed with every --scenario).
        configs: Vec<PathBuf>,
        #[arg(long = "scenario")]
        scenarios: Vec<String>,
        #[arg(long, value_enum)]
        controller: Option<ControllerArg>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        exact: bool,
        #[arg(long, default_value = "batch")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
}

pub fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate { run, out } => commands::simulate(run.config.as_deref(), &run.overrides(), &out, run.quiet),
        Command::Equilibrium { run, theta_r1, theta_r2, theta_s1, theta_s2, e_oc, x3_ref, guess } => {
            let args = EquilibriumArgs { theta_r1, theta_r2, theta_s1, theta_s2, e_oc, x3_ref, guess };
            commands::equilibrium(run.config.as_deref(), &run.overrides(), &args, run.quiet)
        }
        Command::Verify { run, trace, out, pairs, excitation_threshold } => {
            let args = VerifyArgs { trace, pairs, excitation_threshold, ..VerifyArgs::default() };
            commands::verify(run.config.as_deref(), &run.overrides(), &args, out.as_deref(), run.quiet)
        }
        Command::ReplayEstimator { run, input, out } => {
            commands::replay(&input, run.config.as_deref(), &run.overrides(), run.dt, &out, run.quiet)
        }
        Command::Batch { configs, scenarios, controller, dt, duration, seed, exact, out, quiet } => {
            let ov = Overrides {
                controller: controller.map(Into::into),
                dt,
                duration,
                seed,
                exact,
                ..Overrides::default()
            };
            commands::batch(&configs, &scenarios, &ov, &out, quiet)
        }
    }
}

//! Command-line front end for the homotopy data assimilation experiments.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use homotopy_da::experiments::Method;
use homotopy_da::integrators::Scheme;

use crate::commands::{ValidateOptions, FAULT_CONTROL_SCALE};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "homotopy-da", version, about = "Homotopy data assimilation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write moments.csv, particles.csv and summary.txt.
    Scenario(RunArgs),
    /// Run an RMSE grid over methods, ensemble sizes, observation intervals
    /// and inflation rates; write rmse.csv and table1.txt.
    Sweep(RunArgs),
    /// Run the oracle checks and print PASS/FAIL per check.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario name (pure-diffusion, linear-2d, double-well, lorenz63).
    #[arg(value_name = "SCENARIO")]
    pub name: Option<String>,
    /// Scenario name, as an alternative to the positional argument.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Assimilation method(s): homotopy or esrf.
    #[arg(long = "method", value_delimiter = ',')]
    pub methods: Vec<Method>,
    /// Ensemble size(s) M.
    #[arg(long, visible_alias = "ensemble", value_delimiter = ',')]
    pub particles: Vec<usize>,
    /// Number of assimilation cycles N.
    #[arg(long)]
    pub cycles: Option<usize>,
    /// Observation interval(s) of cycled scenarios.
    #[arg(long, value_delimiter = ',')]
    pub dtobs: Vec<f64>,
    /// Integration step.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Window length T of single-window scenarios.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Inflation rate(s).
    #[arg(long, value_delimiter = ',')]
    pub inflation: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Time stepping: euler, meanfield or robust.
    #[arg(long)]
    pub scheme: Option<Scheme>,
    /// Diffusion strength sigma.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Observation noise variance R.
    #[arg(long)]
    pub obs_var: Option<f64>,
    /// Observed value y.
    #[arg(long)]
    pub obs_value: Option<f64>,
    /// Variance of the initial law.
    #[arg(long)]
    pub initial_var: Option<f64>,
    /// Homotopy times at which particles are written.
    #[arg(long, value_delimiter = ',')]
    pub snapshots: Vec<f64>,
    /// Output directory (default: out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// key = value configuration file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write a gnuplot script next to the CSV files.
    #[arg(long)]
    pub emit_plot_script: bool,
    /// Testing aid: scale the control by 1.1.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Ensemble size for the moment-matching checks (default: scenario preset).
    #[arg(long, visible_alias = "ensemble")]
    pub particles: Option<usize>,
    /// Seeds for the determinism check; repeat the flag for several.
    #[arg(long = "seed", default_values_t = [7u64, 8])]
    pub seeds: Vec<u64>,
    /// Testing aid: scale the control by 1.1 so moment matching fails.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

fn non_empty<T>(v: Vec<T>) -> Option<Vec<T>> {
    (!v.is_empty()).then_some(v)
}

impl RunArgs {
    /// Flag layer of the configuration.
    pub fn flag_config(&self) -> Result<RunConfig> {
        let scenario = match (&self.name, &self.scenario) {
            (Some(a), Some(b)) if a != b => {
                return Err(CliError::config(format!("scenario given twice: {a} and {b}")))
            }
            (a, b) => a.clone().or_else(|| b.clone()),
        };
        for (key, values) in [("dtobs", &self.dtobs), ("inflation", &self.inflation), ("snapshots", &self.snapshots)] {
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                return Err(CliError::config(format!("{key} must be finite, got {v}")));
            }
        }
        for (key, value) in [
            ("dt", self.dt),
            ("horizon", self.horizon),
            ("sigma", self.sigma),
            ("obs-var", self.obs_var),
            ("obs-value", self.obs_value),
            ("initial-var", self.initial_var),
        ] {
            if value.is_some_and(|v| !v.is_finite()) {
                return Err(CliError::config(format!("{key} must be finite")));
            }
        }
        Ok(RunConfig {
            scenario,
            methods: non_empty(self.methods.clone()),
            particles: non_empty(self.particles.clone()),
            cycles: self.cycles,
            dt: self.dt,
            horizon: self.horizon,
            dtobs: non_empty(self.dtobs.clone()),
            inflation: non_empty(self.inflation.clone()),
            seed: self.seed,
            scheme: self.scheme,
            sigma: self.sigma,
            obs_var: self.obs_var,
            obs_value: self.obs_value,
            initial_var: self.initial_var,
            snapshots: non_empty(self.snapshots.clone()),
            out: self.out.clone(),
            emit_plot_script: self.emit_plot_script.then_some(true),
        })
    }

    /// Defaults < config file < flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        Ok(RunConfig::default().merged(file).merged(self.flag_config()?))
    }

    fn control_scale(&self) -> f64 {
        if self.inject_fault {
            FAULT_CONTROL_SCALE
        } else {
            1.0
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scenario(args) => {
            let cfg = args.resolve()?;
            commands::cmd_scenario(&cfg, args.control_scale()).map(|_| ())
        }
        Command::Sweep(args) => {
            if args.inject_fault {
                return Err(CliError::config("fault injection applies to scenario and validate"));
            }
            commands::cmd_sweep(&args.resolve()?).map(|_| ())
        }
        Command::Validate(args) => {
            let opts = ValidateOptions {
                particles: args.particles,
                seeds: args.seeds,
                control_scale: if args.inject_fault { FAULT_CONTROL_SCALE } else { 1.0 },
            };
            commands::cmd_validate(&opts).map(|_| ())
        }
    }
}

/// Parses `args`, runs the command and maps the outcome to the exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

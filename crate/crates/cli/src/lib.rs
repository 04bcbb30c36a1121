//! Command-line front end for the array-detector homodyne lab.
//!
//! `arrayhd verify | simulate | single-detector | densities`, configured by
//! a TOML file or a shipped preset, with flag overrides. Exit codes: 0 on
//! success, 1 when a check or run fails, 2 on usage or configuration errors.

pub mod commands;
pub mod config;
pub mod verify;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::{write_json, CommandError};
use crate::config::{ConfigError, RunConfig};

// Like `println!`, but a closed stdout is not an error.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "ARRAYHD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "arrayhd", version, about = "Array-detector balanced homodyne tomography lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the operator-identity suite.
    Verify,
    /// Monte Carlo sampling, histogram and goodness of fit.
    Simulate,
    /// Nine-pixel single-port reconstruction.
    SingleDetector,
    /// Analytic and Fock-space density grids.
    Densities,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Fig1,
    Fig2,
    Fig3,
    Vacuum,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig1 => "fig1",
            Preset::Fig2 => "fig2",
            Preset::Fig3 => "fig3",
            Preset::Vacuum => "vacuum",
        }
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,

    /// Shipped configuration.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,

    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Number of Monte Carlo samples.
    #[arg(long, global = true, value_name = "N")]
    pub samples: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Histogram bins per axis; grid points per axis for `densities`.
    #[arg(long, global = true, value_name = "N")]
    pub bins: Option<usize>,

    /// Half-width of the square histogram or density grid.
    #[arg(long, global = true, value_name = "R")]
    pub range: Option<f64>,
}

impl CommonArgs {
    /// The preset or file configuration with flag overrides applied.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut config = match (&self.config, self.preset) {
            (Some(path), _) => RunConfig::from_file(path)?,
            (None, Some(p)) => RunConfig::preset(p.name())?,
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(n) = self.samples {
            config.simulate.samples = n;
        }
        if let Some(b) = self.bins {
            config.simulate.bins = b;
            config.densities.points = b;
        }
        if let Some(r) = self.range {
            config.simulate.range = r;
            config.densities.range = r;
        }
        Ok(config)
    }
}

/// Reads the worker cap from [`THREADS_ENV`].
pub fn thread_cap() -> Result<Option<usize>, ConfigError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(ConfigError::Invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match thread_cap() {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("warning: could not size the worker pool: {e}");
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    }
    let config = match cli.common.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match execute(&cli.command, &config, &cli.common.out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: &Command, config: &RunConfig, out: &Path) -> Result<i32, CommandError> {
    match command {
        Command::Verify => {
            let report = verify::run_suite(&config.verify).map_err(|e| CommandError::Config(ConfigError::Invalid(e)))?;
            let path = write_json(out, "verify-report.json", &report)?;
            for c in report.checks.iter().filter(|c| c.status == verify::Status::Fail) {
                say!("FAIL {}: {} (deviation {:e} > {:e})", c.identity, c.case, c.deviation, c.tolerance);
            }
            say!(
                "{} passed, {} failed, {} expected failures; report at {}",
                report.passed,
                report.failed,
                report.expected_failures,
                path.display()
            );
            Ok(if report.ok() { 0 } else { 1 })
        }
        Command::Simulate => {
            let r = commands::simulate(config, out)?;
            say!(
                "{} samples (acceptance {:.4}, expected {:.4}); chi2 = {:.2} on {} dof, p = {:.4}; KS p = {:.4}, {:.4}; \
                 variance error {:.3}%",
                r.samples,
                r.acceptance_rate,
                r.expected_acceptance_rate,
                r.fit.chi_square,
                r.fit.degrees_of_freedom,
                r.fit.p_value,
                r.fit.ks_x1.p_value,
                r.fit.ks_x2.p_value,
                100.0 * r.marginal_variance.relative_error
            );
            for f in &r.files {
                say!("wrote {}", out.join(f).display());
            }
            Ok(0)
        }
        Command::SingleDetector => {
            let r = commands::single_detector(config, out)?;
            match (&r.selection, &r.diagnosis) {
                (Some(s), _) => {
                    let pixels: Vec<String> = s.pixels.iter().map(|p| p.to_string()).collect();
                    say!("selected pixels {} (condition {:.3e}, seed {})", pixels.join(" "), s.condition, s.seed);
                    for row in &r.deviations {
                        say!(
                            "{}: vs two-port {}, vs direct {:e}",
                            row.quantity,
                            row.single_vs_two_port.map_or("n/a".into(), |d| format!("{d:e}")),
                            row.single_vs_direct
                        );
                    }
                    say!("tolerance {:e}: {}", r.tolerance.unwrap_or(0.0), if r.passed { "pass" } else { "FAIL" });
                }
                (None, Some(d)) => say!("no invertible selection: {d}"),
                (None, None) => {}
            }
            Ok(if r.passed { 0 } else { 1 })
        }
        Command::Densities => {
            let r = commands::densities(config, out)?;
            say!("max |analytic - oracle| = {:e} (cutoff {}, tail weight {:e})", r.max_abs_delta, r.cutoff, r.truncation_weight);
            for f in &r.files {
                say!("wrote {}", out.join(f).display());
            }
            Ok(0)
        }
    }
}

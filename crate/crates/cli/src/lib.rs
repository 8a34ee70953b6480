//! Batch front end: each subcommand reads a TOML run config, runs one
//! stage (or all of them) and writes CSV/JSON outputs plus a manifest of
//! content hashes into the output directory.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use output::OutDir;

/// Exit status for a configuration or input problem.
pub const EXIT_INPUT: i32 = 2;
/// Exit status for an estimation failure.
pub const EXIT_ESTIMATION: i32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Estimation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Estimation(_) => EXIT_ESTIMATION,
        }
    }
}

impl From<tailrisk::Error> for CliError {
    fn from(e: tailrisk::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Estimation(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tailrisk", version, about = "Regime-dependent ESG tail-risk estimators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for the parallel stages.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Market return series and stress-month classification.
    Stress(Common),
    /// Crash descriptives and regime logits over the threshold grid.
    Crash(Common),
    /// Regime-interacted quantile regressions with bootstrap intervals.
    Quantile(Common),
    /// Cross-fitted DML treatment effects by regime, outcome and learner.
    Dml(Common),
    /// Monte Carlo scoring of an estimator on a synthetic DGP.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write one generated panel (CSV) to this path.
        #[arg(long)]
        panel_out: Option<PathBuf>,
    },
    /// stress, crash, quantile and dml in order.
    Pipeline(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Stress(c) | Command::Crash(c) | Command::Quantile(c) | Command::Dml(c) | Command::Pipeline(c) => c,
            Command::Simulate { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Stress(_) => "stress",
            Command::Crash(_) => "crash",
            Command::Quantile(_) => "quantile",
            Command::Dml(_) => "dml",
            Command::Simulate { .. } => "simulate",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

/// Effective configuration after command-line overrides.
fn effective_config(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.apply_seed();
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Input("no output directory: pass --out or set out_dir".into()))?;
    // the echoed config describes the estimation, not where it was written
    cfg.out_dir = None;
    Ok((cfg, out))
}

fn execute(cmd: &Command) -> Result<(), CliError> {
    let common = cmd.common();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        // a pool may already exist when running in-process more than once
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (cfg, out_path) = effective_config(common)?;
    if !matches!(cmd, Command::Simulate { .. }) {
        cfg.panel_path()?;
    }
    let mut out = OutDir::create(&out_path)?;
    let echoed = toml::to_string(&cfg).map_err(|e| CliError::Input(format!("config: {e}")))?;
    out.write("config.toml", echoed.as_bytes())?;

    let name = cmd.name();
    let mut done: Vec<&str> = Vec::new();
    let mut warnings = 0;
    let result = (|| -> Result<(), CliError> {
        if let Command::Simulate { panel_out, .. } = cmd {
            warnings += commands::simulate(&cfg, &mut out, panel_out.as_deref())?;
            done.push("simulate");
            return Ok(());
        }
        let prep = commands::load_prepared(&cfg)?;
        let stages: &[&str] = match cmd {
            Command::Pipeline(_) => &["stress", "crash", "quantile", "dml"],
            _ => std::slice::from_ref(&name),
        };
        for &stage in stages {
            eprintln!("running {stage}");
            warnings += match stage {
                "stress" => commands::stress(&prep, &mut out)?,
                "crash" => commands::crash(&cfg, &prep, &mut out)?,
                "quantile" => commands::quantile(&cfg, &prep, &mut out)?,
                _ => commands::dml(&cfg, &prep, &mut out)?,
            };
            done.push(stage);
        }
        Ok(())
    })();
    // the manifest reflects whatever completed, even after a failure
    out.write_manifest(name, cfg.seed, &done)?;
    result?;
    if warnings > 0 {
        eprintln!("{name}: finished with {warnings} warning(s)");
    }
    Ok(())
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
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

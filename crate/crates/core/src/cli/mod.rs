//! Command-line interface: `synth`, `train`, `tune`, `warp`, `eval` and
//! `report`, all driven by one flat configuration.
//!
//! Settings are resolved in order: the `--config` file, then the
//! subcommand's convenience flags, then `--set key=value` overrides. Every
//! command records the resolved settings in `run.toml` inside its output
//! directory; passing that file back through `--config` repeats the run.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::eval::EvalError;
use crate::nets::NetError;
use crate::synth::SynthError;
use crate::train::TrainError;
use crate::tune::TuneError;
use crate::volume::VolumeError;
use config::{flatten, parse_override, FlatConfig, RunConfig};

/// Exit status for configuration and input errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for non-finite arithmetic during a run.
pub const EXIT_NUMERIC: i32 = 3;
/// Exit status for any other failure.
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(vec![msg.into()])
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Runtime(_) => EXIT_OTHER,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(v) => CliError::Config(v),
            e if e.is_numeric() => CliError::Numeric(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Folding { .. } | SynthError::Invalid(_) | SynthError::UnsupportedKind => {
                CliError::config(e.to_string())
            }
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match &e {
            EvalError::Alpha(_) => CliError::config(e.to_string()),
            EvalError::Invalid(m) if m.contains("non-finite") => CliError::Numeric(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TuneError> for CliError {
    fn from(e: TuneError) -> Self {
        match e {
            TuneError::NonFiniteObjective { .. } | TuneError::NotPositiveDefinite(_) => CliError::Numeric(e.to_string()),
            TuneError::Grid(_) | TuneError::Budget(_) | TuneError::DimMismatch(..) => CliError::config(e.to_string()),
            TuneError::Eval(e) => e.into(),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "inrreg", version, about = "Deformable registration with α-conditioned implicit neural representations")]
pub struct Cli {
    /// Flat TOML configuration with dotted keys (see `inrreg keys`).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic image pair with known deformation.
    Synth(SynthArgs),
    /// Train a registration network.
    Train(TrainArgs),
    /// Select α by grid search on a conditioned checkpoint and/or by Bayesian
    /// optimization with retraining.
    Tune(TuneArgs),
    /// Warp the moving image and mask with a trained field.
    Warp(WarpArgs),
    /// Landmark error, Dice and Jacobian statistics of a trained field.
    Eval(EvalArgs),
    /// Aggregate run directories into a summary with plots.
    Report(ReportArgs),
    /// List every configuration key with its default.
    Keys,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dims: Option<usize>,
    /// gaussian_bump | sinusoid | affine
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub landmarks: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// conditioned | baseline
    #[arg(long)]
    pub mode: Option<String>,
    /// Regularization weight (baseline mode).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// jacobian | hyperelastic | bending
    #[arg(long)]
    pub reg: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub fixed_mask: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// grid | bo | both
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// α for conditioned checkpoints.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub fixed_mask: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// α for conditioned checkpoints.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to aggregate; defaults to `paths.out`.
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Collects flag values as configuration overrides.
#[derive(Default)]
struct Overrides(Vec<(String, toml::Value)>);

impl Overrides {
    fn path(&mut self, key: &str, v: &Option<PathBuf>) -> &mut Self {
        if let Some(p) = v {
            self.0.push((key.into(), toml::Value::String(p.display().to_string())));
        }
        self
    }
    fn text(&mut self, key: &str, v: &Option<String>) -> &mut Self {
        if let Some(s) = v {
            self.0.push((key.into(), toml::Value::String(s.clone())));
        }
        self
    }
    fn float(&mut self, key: &str, v: Option<f64>) -> &mut Self {
        if let Some(x) = v {
            self.0.push((key.into(), toml::Value::Float(x)));
        }
        self
    }
    fn int(&mut self, key: &str, v: Option<u64>) -> &mut Self {
        if let Some(x) = v {
            self.0.push((key.into(), toml::Value::Integer(x as i64)));
        }
        self
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Tune(_) => "tune",
            Command::Warp(_) => "warp",
            Command::Eval(_) => "eval",
            Command::Report(_) => "report",
            Command::Keys => "keys",
        }
    }

    fn overrides(&self) -> Vec<(String, toml::Value)> {
        let mut o = Overrides::default();
        match self {
            Command::Synth(a) => {
                o.path("paths.out", &a.out)
                    .int("synth.dims", a.dims.map(|d| d as u64))
                    .text("synth.kind", &a.kind)
                    .float("synth.amplitude", a.amplitude)
                    .float("synth.sigma", a.sigma)
                    .int("synth.landmarks", a.landmarks.map(|d| d as u64))
                    .int("synth.seed", a.seed);
            }
            Command::Train(a) => {
                o.path("paths.moving", &a.moving)
                    .path("paths.fixed", &a.fixed)
                    .path("paths.mask", &a.mask)
                    .path("paths.out", &a.out)
                    .text("train.mode", &a.mode)
                    .float("train.alpha", a.alpha)
                    .text("train.reg", &a.reg)
                    .int("train.epochs", a.epochs.map(|e| e as u64))
                    .int("train.seed", a.seed);
            }
            Command::Tune(a) => {
                o.path("paths.checkpoint", &a.checkpoint)
                    .path("paths.moving", &a.moving)
                    .path("paths.fixed", &a.fixed)
                    .path("paths.mask", &a.mask)
                    .path("paths.fixed_mask", &a.fixed_mask)
                    .path("paths.out", &a.out)
                    .text("tune.method", &a.method);
            }
            Command::Warp(a) => {
                o.path("paths.checkpoint", &a.checkpoint)
                    .path("paths.moving", &a.moving)
                    .path("paths.mask", &a.mask)
                    .path("paths.out", &a.out)
                    .float("eval.alpha", a.alpha);
            }
            Command::Eval(a) => {
                o.path("paths.checkpoint", &a.checkpoint)
                    .path("paths.moving", &a.moving)
                    .path("paths.landmarks", &a.landmarks)
                    .path("paths.mask", &a.mask)
                    .path("paths.fixed_mask", &a.fixed_mask)
                    .path("paths.out", &a.out)
                    .float("eval.alpha", a.alpha);
            }
            Command::Report(a) => {
                o.path("paths.out", &a.out);
                if !a.inputs.is_empty() {
                    o.0.push((
                        "report.inputs".into(),
                        toml::Value::Array(
                            a.inputs
                                .iter()
                                .map(|p| toml::Value::String(p.display().to_string()))
                                .collect(),
                        ),
                    ));
                }
            }
            Command::Keys => {}
        }
        o.0
    }
}

/// Merge the config file, the command's flags and `--set` overrides, then
/// validate, reporting every problem at once.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut errors = Vec::new();
    let mut flat = FlatConfig::new();
    if let Some(path) = &cli.config {
        match std::fs::read_to_string(path) {
            Ok(text) => match flatten(&text) {
                Ok(f) => flat = f,
                Err(e) => errors.push(format!("{}: {e}", path.display())),
            },
            Err(e) => errors.push(format!("{}: {e}", path.display())),
        }
    }
    flat.extend(cli.command.overrides());
    for s in &cli.set {
        match parse_override(s) {
            Ok((k, v)) => {
                flat.insert(k, v);
            }
            Err(e) => errors.push(e),
        }
    }
    match RunConfig::from_flat(&flat) {
        Ok(cfg) if errors.is_empty() => Ok(cfg),
        Ok(_) => Err(CliError::Config(errors)),
        Err(more) => {
            errors.extend(more);
            Err(CliError::Config(errors))
        }
    }
}

/// Parse `args`, run the command and return the process exit status.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Tune(_) => commands::tune(&cfg),
        Command::Warp(_) => commands::warp(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Report(_) => commands::report(&cfg),
        Command::Keys => {
            use std::io::Write;
            let defaults = RunConfig::default().to_flat();
            let mut out = std::io::stdout().lock();
            for (k, doc) in config::KEYS {
                let line = match defaults.get(*k) {
                    Some(v) => writeln!(out, "{k} = {v}    # {doc}"),
                    None => writeln!(out, "# {k}    # {doc}"),
                };
                // A closed pipe (e.g. `| head`) simply ends the listing.
                if line.is_err() {
                    break;
                }
            }
            Ok(())
        }
    }
}

//! `ssdnet`: synthesize data, train, evaluate and inspect SSD-Net models.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssdnet_core::Error;

use settings::Settings;

#[derive(Parser)]
#[command(name = "ssdnet", version, about = "Single-scale dual-branch underwater image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a manifest's training split.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a manifest's test split.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Run one image through a checkpoint and export both branches.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Input P6 PPM image.
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference check of the full training loss on a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Parameter count and its growth with cascade and transformer depth.
    Params {
        #[command(flatten)]
        common: Common,
    },
}

/// Flags shared by every subcommand; each one overrides the config file.
#[derive(Args, Default)]
struct Common {
    /// Flat TOML file with any subset of the configuration keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override any key, value in config-file syntax (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    assignments: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Feature width C.
    #[arg(long)]
    width: Option<usize>,
    /// Number of cascaded fusion stages N.
    #[arg(long)]
    cascade_depth: Option<usize>,
    /// Transformer blocks per stage M.
    #[arg(long)]
    ast_depth: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory or manifest file.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl Common {
    /// Defaults, then `preset`, then the config file, then flags in order.
    fn resolve(&self, preset: Settings) -> ssdnet_core::Result<Settings> {
        let mut s = Settings::defaults().layer(preset);
        if let Some(path) = &self.config {
            s = s.layer(Settings::load(path)?);
        }
        for a in &self.assignments {
            s = s.layer(Settings::parse_assignment(a)?);
        }
        Ok(s.layer(Settings {
            seed: self.seed,
            epochs: self.epochs,
            width: self.width,
            cascade_depth: self.cascade_depth,
            ast_depth: self.ast_depth,
            n_train: self.n_train,
            n_test: self.n_test,
            out: self.out.clone(),
            checkpoint: self.checkpoint.clone(),
            manifest: self.manifest.clone(),
            ..Settings::default()
        }))
    }
}

/// Exit status for each failure class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint(_) => 3,
        Error::Numeric { .. } | Error::NonFiniteLoss { .. } | Error::MissingGradient(_) | Error::Tape(_) => 4,
    }
}

fn configure_threads() -> ssdnet_core::Result<()> {
    let Ok(raw) = std::env::var("SSDNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SSDNET_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> ssdnet_core::Result<commands::Outcome> {
    configure_threads()?;
    match cli.command {
        Command::Synth { common } => commands::synth(&common.resolve(Settings::default())?),
        Command::Train { common } => commands::train(&common.resolve(Settings::default())?),
        Command::Eval { common } => commands::eval(&common.resolve(Settings::default())?),
        Command::Infer { common, input } => commands::infer(&common.resolve(Settings::default())?, &input),
        Command::Gradcheck { common } => commands::gradcheck(&common.resolve(commands::gradcheck_preset())?),
        Command::Params { common } => commands::params(&common.resolve(Settings::default())?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::OutOfTolerance) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
